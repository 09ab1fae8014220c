use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgcn::graph::{build_adjacency, normalized_laplacian, AdjacencyConfig, LaplacianBundle, WeightedGraph};
use stgcn::layers::{BlockChannels, GraphConvKind, GraphConvLayer, ModelConfig, StConvBlock, StgcnModel};
use stgcn::tensor::Tensor;

fn ring(n: usize) -> WeightedGraph<f64> {
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            dense[i * n + j] = 0.8;
            dense[j * n + i] = 0.8;
        }
    }
    WeightedGraph::from_dense((0..n).map(|i| format!("s{i}")).collect(), &dense).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(params: &[(String, Tensor<f64>)], rng: &mut ChaCha8Rng) {
    for (_, p) in params {
        p.update_data(|d| d.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5))).unwrap();
    }
}

fn temporal_count(kt: usize, c_in: usize, c_out: usize) -> usize {
    kt * c_in * 2 * c_out + 2 * c_out + if c_in == c_out { 0 } else { c_in * c_out }
}

fn expected_count(cfg: &ModelConfig) -> usize {
    let k = cfg.graph_conv.order();
    let blocks: usize = cfg
        .blocks
        .iter()
        .map(|&BlockChannels(ci, cm, co)| {
            temporal_count(cfg.kt, ci, co) + (k * co * cm + cm) + temporal_count(cfg.kt, cm, co) + 2 * cfg.nodes * co
        })
        .sum();
    let c = cfg.blocks.last().unwrap().2;
    blocks + temporal_count(cfg.head_width(), c, c) + c + 1
}

/// Stations scattered over a square, joined by the default distance kernel.
fn scattered(n: usize, side: f64, seed: u64) -> WeightedGraph<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..side), rng.random_range(0.0..side))).collect();
    let mut records = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            records.push((i, j, (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1)));
        }
    }
    build_adjacency(&records, n, &AdjacencyConfig::default()).unwrap()
}

#[test]
fn standard_model_on_228_nodes() {
    let bundle = normalized_laplacian(&scattered(228, 30.0, 228)).unwrap();
    let cfg = ModelConfig::standard(228);
    assert_eq!(cfg.block_lengths(), vec![8, 4]);
    let model = StgcnModel::new(cfg, &bundle, 0).unwrap();
    // 40144 in the first block, 64272 in the second, 32961 in the head.
    assert_eq!(model.parameter_count(), 137_377);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = model.forward(&random(&mut rng, &[2, 12, 228, 1])).unwrap();
    assert_eq!(out.shape(), &[2, 228, 1]);
    assert!(out.to_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn parameter_count_matches_closed_form() {
    let bundle = normalized_laplacian(&ring(7)).unwrap();
    let configs = [
        (GraphConvKind::Chebyshev { k: 1 }, 2, vec![BlockChannels(1, 3, 5)], 9),
        (GraphConvKind::Chebyshev { k: 4 }, 3, vec![BlockChannels(1, 8, 8), BlockChannels(8, 2, 6)], 12),
        (GraphConvKind::FirstOrder, 2, vec![BlockChannels(1, 4, 4), BlockChannels(4, 4, 4), BlockChannels(4, 6, 3)], 10),
    ];
    for (kind, kt, blocks, history) in configs {
        let cfg = ModelConfig {
            nodes: 7,
            history,
            kt,
            graph_conv: kind,
            blocks,
            layer_norm_eps: 1e-5,
        };
        let model = StgcnModel::new(cfg.clone(), &bundle, 3).unwrap();
        assert_eq!(model.parameter_count(), expected_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn single_node_model_runs() {
    let graph = WeightedGraph::<f64>::empty(vec!["only".into()]);
    let bundle = normalized_laplacian(&graph).unwrap();
    for kind in [GraphConvKind::Chebyshev { k: 3 }, GraphConvKind::FirstOrder] {
        let cfg = ModelConfig {
            nodes: 1,
            graph_conv: kind,
            blocks: vec![BlockChannels(1, 4, 8), BlockChannels(8, 4, 8)],
            ..ModelConfig::standard(1)
        };
        let model = StgcnModel::new(cfg, &bundle, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = model.forward(&random(&mut rng, &[3, 12, 1, 1])).unwrap();
        assert_eq!(out.shape(), &[3, 1, 1]);
        assert!(out.to_vec().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let bundle = normalized_laplacian(&ring(4)).unwrap();
    let model = StgcnModel::new(ModelConfig::standard(4), &bundle, 0).unwrap();
    assert!(model.forward(&Tensor::zeros(&[1, 11, 4, 1])).is_err());
    assert!(model.forward(&Tensor::zeros(&[1, 12, 5, 1])).is_err());
    assert!(StgcnModel::new(ModelConfig::standard(5), &bundle, 0).is_err());
}

fn block(bundle: &LaplacianBundle<f64>, kind: GraphConvKind, seed: u64) -> StConvBlock<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = StConvBlock::new((2, 3, 4), 3, kind, bundle, 1e-5, &mut rng).unwrap();
    randomize(&b.parameters(), &mut rng);
    b
}

#[test]
fn block_output_depends_only_on_its_receptive_field() {
    let bundle = normalized_laplacian(&ring(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = block(&bundle, GraphConvKind::Chebyshev { k: 3 }, 4);
    let x = random(&mut rng, &[1, 12, 5, 2]);
    let base = b.forward(&x).unwrap().to_vec();
    let frame = 5 * 4;
    for s in 0..12 {
        let mut data = x.to_vec();
        data[s * 10 + 3] += 0.75;
        let out = b.forward(&Tensor::new(&[1, 12, 5, 2], data).unwrap()).unwrap().to_vec();
        for t in 0..8 {
            let same = base[t * frame..(t + 1) * frame] == out[t * frame..(t + 1) * frame];
            let covered = (t..=t + 4).contains(&s);
            assert_eq!(same, !covered, "input step {s}, output step {t}");
        }
    }
}

#[test]
fn model_output_sees_every_history_step() {
    let bundle = normalized_laplacian(&ring(4)).unwrap();
    let cfg = ModelConfig {
        blocks: vec![BlockChannels(1, 3, 4), BlockChannels(4, 3, 4)],
        ..ModelConfig::standard(4)
    };
    let model = StgcnModel::new(cfg, &bundle, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    randomize(&model.parameters(), &mut rng);
    let x = random(&mut rng, &[1, 12, 4, 1]);
    let base = model.forward(&x).unwrap().to_vec();
    for s in 0..12 {
        let mut data = x.to_vec();
        data[s * 4] += 0.5;
        let out = model.forward(&Tensor::new(&[1, 12, 4, 1], data).unwrap()).unwrap().to_vec();
        assert_ne!(out, base, "step {s} did not reach the output");
    }
}

#[test]
fn zeroed_block_returns_norm_bias() {
    let bundle = normalized_laplacian(&ring(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = block(&bundle, GraphConvKind::FirstOrder, 6);
    let mut bias = Vec::new();
    for (name, p) in b.parameters() {
        if name == "norm.bias" {
            bias = p.to_vec();
        } else {
            p.update_data(|d| d.fill(0.0)).unwrap();
        }
    }
    let out = b.forward(&random(&mut rng, &[2, 9, 5, 2])).unwrap();
    assert_eq!(out.shape(), &[2, 5, 5, 4]);
    for frame in out.to_vec().chunks(bias.len()) {
        assert_eq!(frame, bias.as_slice());
    }
}

#[test]
fn first_order_equals_halved_chebyshev_on_a_matching() {
    // Three disjoint unit edges: every degree is 1, so the renormalized
    // propagation is (I + W)/2, and with λmax = 2 the scaled Laplacian is -W.
    let n = 6;
    let mut dense = vec![0.0; n * n];
    for (i, j) in [(0, 3), (1, 5), (2, 4)] {
        dense[i * n + j] = 1.0;
        dense[j * n + i] = 1.0;
    }
    let graph = WeightedGraph::from_dense((0..n).map(|i| i.to_string()).collect(), &dense).unwrap();
    let bundle = LaplacianBundle::with_lambda_max(&graph, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (c_in, c_out) = (3, 2);
    let theta = random(&mut rng, &[1, c_in, c_out]);
    let bias = random(&mut rng, &[c_out]);
    let halves: Vec<f64> = theta.to_vec().iter().map(|v| v / 2.0).collect();
    let cheb_theta: Vec<f64> = halves.iter().copied().chain(halves.iter().map(|v| -v)).collect();

    let first = GraphConvLayer::new(GraphConvKind::FirstOrder, c_in, c_out, &bundle, &mut rng)
        .unwrap()
        .with_parameters(theta, bias.clone())
        .unwrap();
    let cheb = GraphConvLayer::new(GraphConvKind::Chebyshev { k: 2 }, c_in, c_out, &bundle, &mut rng)
        .unwrap()
        .with_parameters(Tensor::new(&[2, c_in, c_out], cheb_theta).unwrap(), bias)
        .unwrap();
    let x = random(&mut rng, &[2, 3, n, c_in]);
    let a = first.forward(&x).unwrap().to_vec();
    let b = cheb.forward(&x).unwrap().to_vec();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12, "{u} vs {v}");
    }
}
