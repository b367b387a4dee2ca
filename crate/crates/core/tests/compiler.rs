use nasforge::arch::{
    extend_space, sample_uniform, Activation, ArchDescription, Block, CellDescription, CellIndices,
    CellSearchSpace, Combiner, ConvArch, ConvLayerSpec, ConvSearchSpace, SearchSpace,
};
use nasforge::compiler::{compile_cell, compile_conv, reference_lstm, CompiledGraph, ConvOptions};
use nasforge::numeric::gradcheck::{check_graph, GradCheckOptions};
use nasforge::numeric::{Feed, Mode, Op, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(fh: usize, fw: usize, s: usize, f: usize, skips: &[usize]) -> ConvLayerSpec {
    ConvLayerSpec {
        filter_height: fh,
        filter_width: fw,
        stride_height: s,
        stride_width: s,
        num_filters: f,
        skip_inputs: skips.iter().copied().collect(),
    }
}

fn image_feed(batch: usize, shape: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> Feed {
    let mut f = Feed::new();
    f.insert(
        "image".into(),
        Tensor::uniform(&[batch, shape[0], shape[1], shape[2]], -1.0, 1.0, rng),
    );
    f.insert(
        "labels".into(),
        Tensor::new(vec![batch], (0..batch).map(|_| rng.random_range(0..classes) as f64).collect()).unwrap(),
    );
    f
}

fn cell_feed(_cg: &CompiledGraph, batch: usize, d: usize, h: usize, rng: &mut ChaCha8Rng) -> Feed {
    let mut f = Feed::new();
    f.insert("x".into(), Tensor::uniform(&[batch, d], -1.0, 1.0, rng));
    f.insert("h_prev".into(), Tensor::uniform(&[batch, h], -1.0, 1.0, rng));
    f.insert("c_prev".into(), Tensor::uniform(&[batch, h], -1.0, 1.0, rng));
    f
}

fn ops_of(cg: &CompiledGraph) -> Vec<&'static str> {
    cg.graph.nodes().iter().map(|n| n.op.name()).collect()
}

#[test]
fn single_layer_is_a_chain() {
    let arch = ConvArch { layers: vec![layer(3, 3, 1, 24, &[])] };
    let opts = ConvOptions::from_space(&ConvSearchSpace::default());
    let cg = compile_conv(&arch, &opts, [8, 8, 3], 4, 2).unwrap();
    let ops = ops_of(&cg);
    assert!(!ops.contains(&"zero_pad") && !ops.contains(&"concat"));
    assert_eq!(ops.iter().filter(|o| **o == "im2col").count(), 1);
    let names: Vec<&str> = cg.manifest.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        ["classifier.bias", "classifier.weight", "conv0.bn.beta", "conv0.bn.gamma", "conv0.weight"]
    );
}

#[test]
fn mismatched_skip_inputs_are_padded_then_concatenated_in_order() {
    // layer 1 halves the resolution; layer 2 reads both layer 0 and layer 1.
    let arch = ConvArch {
        layers: vec![layer(3, 3, 1, 24, &[]), layer(3, 3, 2, 36, &[0]), layer(1, 1, 1, 24, &[0, 1])],
    };
    let opts = ConvOptions::from_space(&ConvSearchSpace::default());
    let cg = compile_conv(&arch, &opts, [8, 8, 3], 4, 2).unwrap();
    let nodes = cg.graph.nodes();
    let pads: Vec<_> = nodes.iter().filter(|n| matches!(n.op, Op::ZeroPad { .. })).collect();
    assert_eq!(pads.len(), 1);
    assert_eq!(pads[0].shape, vec![2, 8, 8, 36]);
    let concat = nodes.iter().find(|n| matches!(n.op, Op::Concat)).unwrap();
    assert_eq!(concat.shape, vec![2, 8, 8, 60]);
    // Ascending source order: layer 0 (24 channels) first.
    assert_eq!(nodes[concat.inputs[0].index()].shape[3], 24);
    assert_eq!(nodes[concat.inputs[1].index()].shape[3], 36);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = cg.init_params(&mut rng);
    let e = cg.graph.forward(&params, &image_feed(2, [8, 8, 3], 4, &mut rng), Mode::Train).unwrap();
    assert_eq!(cg.graph.output_value(&e, "logits").unwrap().shape(), &[2, 4]);
}

#[test]
fn chain_mode_ignores_skip_sets_and_reads_the_last_layer() {
    let arch = ConvArch {
        layers: vec![layer(3, 3, 1, 24, &[]), layer(1, 3, 1, 36, &[]), layer(5, 1, 1, 24, &[])],
    };
    let space = ConvSearchSpace {
        skip_connections: false,
        ..Default::default()
    };
    let cg = compile_conv(&arch, &ConvOptions::from_space(&space), [8, 8, 3], 4, 2).unwrap();
    assert!(!ops_of(&cg).contains(&"concat"));
    assert_eq!(cg.manifest["classifier.weight"].shape, vec![8 * 8 * 24, 4]);
}

#[test]
fn unconsumed_layers_all_reach_the_classifier() {
    let arch = ConvArch {
        layers: vec![layer(3, 3, 2, 24, &[]), layer(1, 1, 1, 36, &[]), layer(3, 1, 1, 48, &[1])],
    };
    let opts = ConvOptions::from_space(&ConvSearchSpace {
        strides: Some(vec![1, 2]),
        ..Default::default()
    });
    let cg = compile_conv(&arch, &opts, [8, 8, 3], 4, 2).unwrap();
    // layer 0 (4x4x24) and layer 2 (8x8x48) are sinks.
    assert_eq!(cg.manifest["classifier.weight"].shape, vec![8 * 8 * 72, 4]);
    assert!(cg.summary.iter().any(|l| l == "classifier reads: layer 0, layer 2"));
}

#[test]
fn pooling_positions_are_fixed() {
    let arch = ConvArch {
        layers: vec![layer(3, 3, 1, 24, &[]), layer(3, 3, 1, 24, &[0])],
    };
    let mut opts = ConvOptions::from_space(&ConvSearchSpace::default());
    opts.pool_after = vec![0];
    let cg = compile_conv(&arch, &opts, [8, 8, 3], 4, 2).unwrap();
    assert_eq!(ops_of(&cg).iter().filter(|o| **o == "max_pool2").count(), 1);
    assert_eq!(cg.manifest["classifier.weight"].shape, vec![4 * 4 * 24, 4]);
}

#[test]
fn random_conv_descriptions_compile_and_run() {
    let space = ConvSearchSpace {
        strides: Some(vec![1, 2, 3]),
        ..Default::default()
    };
    let opts = ConvOptions::from_space(&space);
    let space = SearchSpace::Conv(space);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..300 {
        let depth = 1 + i % 12;
        let ArchDescription::Conv(arch) = sample_uniform(&space, depth, &mut rng) else { unreachable!() };
        let cg = compile_conv(&arch, &opts, [8, 8, 3], 4, 1).unwrap();
        let params = cg.init_params(&mut rng);
        let e = cg.graph.forward(&params, &image_feed(1, [8, 8, 3], 4, &mut rng), Mode::Train).unwrap();
        assert!(cg.graph.output_value(&e, "loss").unwrap().is_finite());
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let space = ConvSearchSpace {
        filter_heights: vec![1, 3],
        filter_widths: vec![1, 3],
        num_filters: vec![2, 3],
        strides: Some(vec![1, 2]),
        skip_connections: true,
        pool_after: vec![],
    };
    let opts = ConvOptions::from_space(&space);
    let space = SearchSpace::Conv(space);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let check = GradCheckOptions {
        coords_per_slot: Some(6),
        directions: 2,
        ..Default::default()
    };
    for i in 0..10 {
        let ArchDescription::Conv(arch) = sample_uniform(&space, 1 + i % 4, &mut rng) else { unreachable!() };
        let cg = compile_conv(&arch, &opts, [5, 5, 2], 3, 3).unwrap();
        let params = cg.init_params(&mut rng);
        let feed = image_feed(3, [5, 5, 2], 3, &mut rng);
        let report = check_graph(&cg.graph, &params, &feed, "loss", &check).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}\n{}", cg.dump());
    }
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    (0..n).map(|j| (0..k).map(|i| x[i] * w.at(&[i, j])).sum()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn worked_example_matches_straight_line_oracle() {
    let (d, h, batch) = (3, 4, 1);
    let cg = compile_cell(&CellDescription::worked_example(), d, h, batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let params = cg.init_params(&mut rng);
        let feed = cell_feed(&cg, batch, d, h, &mut rng);
        let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
        let (x, hp, cp) = (feed["x"].data(), feed["h_prev"].data(), feed["c_prev"].data());
        let w = |n: usize| params.get(&format!("cell.w{n}")).unwrap();
        let (w1x, w2h, w3x, w4h) = (matvec(x, w(1)), matvec(hp, w(2)), matvec(x, w(3)), matvec(hp, w(4)));
        for j in 0..h {
            let a0 = (w1x[j] + w2h[j]).tanh();
            let c_t = w3x[j] * w4h[j];
            let a1 = c_t.max(0.0);
            let a0_new = (a0 + cp[j]).max(0.0);
            let h_t = sigmoid(a0_new * a1);
            assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - h_t).abs() < 1e-12);
            assert!((cg.graph.output_value(&e, "c").unwrap().data()[j] - c_t).abs() < 1e-12);
        }
    }
}

#[test]
fn all_linear_cell_is_an_explicit_linear_map() {
    for base in [2usize, 4] {
        let n = 2 * base - 1;
        let desc = CellDescription {
            nodes: vec![Block::new(Combiner::Add, Activation::Identity); n],
            inject: Block::new(Combiner::Add, Activation::Identity),
            indices: CellIndices { output: 0, target: base },
        };
        let (d, h) = (3, 2);
        let cg = compile_cell(&desc, d, h, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(base as u64);
        let params = cg.init_params(&mut rng);
        // h_t = x (sum of odd W) + h (sum of even W) + c
        let mut a = Tensor::zeros(&[d, h]);
        let mut b = Tensor::zeros(&[h, h]);
        for i in 0..base {
            a.add_scaled(params.get(&format!("cell.w{}", 2 * i + 1)).unwrap(), 1.0);
            b.add_scaled(params.get(&format!("cell.w{}", 2 * i + 2)).unwrap(), 1.0);
        }
        let feed = cell_feed(&cg, 1, d, h, &mut rng);
        let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
        let xa = matvec(feed["x"].data(), &a);
        let hb = matvec(feed["h_prev"].data(), &b);
        let c_leaf0 = {
            let (p, q) = (
                matvec(feed["x"].data(), params.get("cell.w1").unwrap()),
                matvec(feed["h_prev"].data(), params.get("cell.w2").unwrap()),
            );
            p.iter().zip(&q).map(|(u, v)| u + v).collect::<Vec<_>>()
        };
        for j in 0..h {
            let want = xa[j] + hb[j] + feed["c_prev"].data()[j];
            assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - want).abs() < 1e-12);
            assert!((cg.graph.output_value(&e, "c").unwrap().data()[j] - c_leaf0[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn injection_precedes_the_cell_read_when_indices_coincide() {
    // Base 2, all identity/add, inject (elem_mult, tanh) at node 1 which is
    // also the c_t node: c_t = pre_1 * c_prev, and the root sees tanh of it.
    let desc = CellDescription {
        nodes: vec![Block::new(Combiner::Add, Activation::Identity); 3],
        inject: Block::new(Combiner::ElemMult, Activation::Tanh),
        indices: CellIndices { output: 1, target: 1 },
    };
    let (d, h) = (2, 2);
    let cg = compile_cell(&desc, d, h, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = cg.init_params(&mut rng);
    let feed = cell_feed(&cg, 1, d, h, &mut rng);
    let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
    let (x, hp, cp) = (feed["x"].data(), feed["h_prev"].data(), feed["c_prev"].data());
    let w = |n: usize| params.get(&format!("cell.w{n}")).unwrap();
    let (p0, q0, p1, q1) = (matvec(x, w(1)), matvec(hp, w(2)), matvec(x, w(3)), matvec(hp, w(4)));
    for j in 0..h {
        let c_t = (p1[j] + q1[j]) * cp[j];
        let h_t = p0[j] + q0[j] + c_t.tanh();
        assert!((cg.graph.output_value(&e, "c").unwrap().data()[j] - c_t).abs() < 1e-12);
        assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - h_t).abs() < 1e-12);
    }

    // Injection at the root happens before h_t is read.
    let desc = CellDescription {
        nodes: vec![Block::new(Combiner::Add, Activation::Identity); 3],
        inject: Block::new(Combiner::Add, Activation::Tanh),
        indices: CellIndices { output: 0, target: 2 },
    };
    let cg = compile_cell(&desc, d, h, 1).unwrap();
    let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
    for j in 0..h {
        let h_t = (p0[j] + q0[j] + p1[j] + q1[j] + cp[j]).tanh();
        assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - h_t).abs() < 1e-12);
    }
}

fn extended(base: usize) -> SearchSpace {
    SearchSpace::Cell(extend_space(&CellSearchSpace::with_base(base), &["max"], &["sin"]).unwrap())
}

#[test]
fn random_base8_cells_have_finite_gradients() {
    let space = extended(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let ArchDescription::Cell(desc) = sample_uniform(&space, 0, &mut rng) else { unreachable!() };
        let cg = compile_cell(&desc, 5, 6, 3).unwrap();
        let params = cg.init_params(&mut rng);
        let feed = cell_feed(&cg, 3, 5, 6, &mut rng);
        let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
        let h = cg.graph.output("h").unwrap();
        let grads = cg.graph.backward(&e, h, &Tensor::ones(&[3, 6])).unwrap();
        assert!(grads.is_finite());
        assert_eq!(grads.len(), 16);
    }
}

fn ancestors(cg: &CompiledGraph, out: &str) -> Vec<bool> {
    let nodes = cg.graph.nodes();
    let mut seen = vec![false; nodes.len()];
    let mut stack = vec![cg.graph.output(out).unwrap().index()];
    while let Some(i) = stack.pop() {
        if !std::mem::replace(&mut seen[i], true) {
            stack.extend(nodes[i].inputs.iter().map(|n| n.index()));
        }
    }
    seen
}

#[test]
fn every_leaf_is_an_ancestor_of_the_hidden_output() {
    let space = extended(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let ArchDescription::Cell(desc) = sample_uniform(&space, 0, &mut rng) else { unreachable!() };
        let cg = compile_cell(&desc, 3, 4, 1).unwrap();
        let seen = ancestors(&cg, "h");
        for (i, n) in cg.graph.nodes().iter().enumerate() {
            if matches!(n.op, Op::Param(_) | Op::Input(_)) {
                assert!(seen[i], "{:?} unreachable in {desc:?}", n.op);
            }
        }
    }
}

#[test]
fn smooth_cells_pass_gradient_to_every_leaf() {
    let space = SearchSpace::Cell(CellSearchSpace {
        combiners: vec![Combiner::Add, Combiner::ElemMult],
        activations: vec![Activation::Identity, Activation::Tanh, Activation::Sigmoid, Activation::Sin],
        base: 4,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let ArchDescription::Cell(desc) = sample_uniform(&space, 0, &mut rng) else { unreachable!() };
        let cg = compile_cell(&desc, 3, 4, 8).unwrap();
        let params = cg.init_params(&mut rng);
        let feed = cell_feed(&cg, 8, 3, 4, &mut rng);
        let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
        let h = cg.graph.output("h").unwrap();
        let grads = cg.graph.backward(&e, h, &Tensor::ones(&[8, 4])).unwrap();
        for leaf in 0..4 {
            let norm = grads.get(&format!("cell.w{}", 2 * leaf + 1)).unwrap().norm_sq()
                + grads.get(&format!("cell.w{}", 2 * leaf + 2)).unwrap().norm_sq();
            assert!(norm > 0.0, "leaf {leaf} gets no gradient in {desc:?}");
        }
    }
}

#[test]
fn cell_gradients_match_finite_differences() {
    let space = extended(2);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let ArchDescription::Cell(desc) = sample_uniform(&space, 0, &mut rng) else { unreachable!() };
        let cg = compile_cell(&desc, 3, 3, 2).unwrap();
        let params = cg.init_params(&mut rng);
        let feed = cell_feed(&cg, 2, 3, 3, &mut rng);
        for out in ["h", "c"] {
            let r = check_graph(&cg.graph, &params, &feed, out, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{desc:?} {out}: {r:?}");
        }
    }
}

#[test]
fn cell_parameter_count_scales_with_base_and_width() {
    for base in [2usize, 4, 8] {
        for (h, d) in [(4, 3), (16, 8), (32, 32)] {
            let desc = CellDescription::tanh_rnn(base);
            let cg = compile_cell(&desc, d, h, 1).unwrap();
            assert_eq!(cg.param_count(), base * h * (h + d));
        }
    }
}

#[test]
fn lstm_with_zero_weights_halves_the_cell() {
    let cg = reference_lstm(3, 2, 1).unwrap();
    let params: ParamSet = cg
        .manifest
        .iter()
        .map(|(k, s)| (k.clone(), Tensor::zeros(&s.shape)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feed = cell_feed(&cg, 1, 3, 2, &mut rng);
    let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
    for j in 0..2 {
        let c = 0.5 * feed["c_prev"].data()[j];
        assert_eq!(cg.graph.output_value(&e, "c").unwrap().data()[j], c);
        assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - 0.5 * c.tanh()).abs() < 1e-15);
    }
}

#[test]
fn lstm_matches_scalar_loop_oracle() {
    let (d, h) = (3, 4);
    let cg = reference_lstm(d, h, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = cg.init_params(&mut rng);
    let params: ParamSet = params
        .iter()
        .map(|(k, t)| (k.to_string(), Tensor::uniform(t.shape(), -0.8, 0.8, &mut rng)))
        .collect();
    let (wx, wh, b) = (
        params.get("lstm.wx").unwrap(),
        params.get("lstm.wh").unwrap(),
        params.get("lstm.b").unwrap(),
    );
    for _ in 0..100 {
        let feed = cell_feed(&cg, 1, d, h, &mut rng);
        let e = cg.graph.forward(&params, &feed, Mode::Train).unwrap();
        let (x, hp, cp) = (feed["x"].data(), feed["h_prev"].data(), feed["c_prev"].data());
        for j in 0..h {
            let gate = |k: usize| {
                let col = k * h + j;
                let mut z = b.data()[col];
                for i in 0..d {
                    z += x[i] * wx.at(&[i, col]);
                }
                for i in 0..h {
                    z += hp[i] * wh.at(&[i, col]);
                }
                z
            };
            let (i, f, g, o) = (sigmoid(gate(0)), sigmoid(gate(1)), gate(2).tanh(), sigmoid(gate(3)));
            let c = f * cp[j] + i * g;
            let hv = o * c.tanh();
            assert!((cg.graph.output_value(&e, "c").unwrap().data()[j] - c).abs() < 1e-10);
            assert!((cg.graph.output_value(&e, "h").unwrap().data()[j] - hv).abs() < 1e-10);
        }
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let cg = reference_lstm(3, 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = cg.init_params(&mut rng);
    let feed = cell_feed(&cg, 2, 3, 4, &mut rng);
    for out in ["h", "c"] {
        let r = check_graph(&cg.graph, &params, &feed, out, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn invalid_descriptions_are_reported_not_compiled() {
    let mut desc = CellDescription::worked_example();
    desc.indices.output = 3;
    assert!(compile_cell(&desc, 2, 2, 1).is_err());
    let arch = ConvArch { layers: vec![layer(3, 3, 1, 24, &[1])] };
    let opts = ConvOptions::from_space(&ConvSearchSpace::default());
    assert!(compile_conv(&arch, &opts, [8, 8, 3], 4, 1).is_err());
}

#[test]
fn worked_example_dump_matches_golden() {
    let cg = compile_cell(&CellDescription::worked_example(), 2, 3, 1).unwrap();
    let path = format!("{}/tests/golden/v1/worked_example.dump.txt", env!("CARGO_MANIFEST_DIR"));
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(cg.dump(), want);
}

#[test]
fn unrolled_sequence_models_match_finite_differences() {
    use nasforge::compiler::{compile_sequence_model, RecurrentCell, SequenceShape};
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = SequenceShape {
        vocab: 5,
        embed: 3,
        hidden: 4,
        length: 6,
        scored: vec![2, 4, 5],
    };
    for cell in [
        RecurrentCell::Lstm,
        RecurrentCell::Tree(CellDescription::worked_example()),
        RecurrentCell::Tree(CellDescription::tanh_rnn(2)),
    ] {
        let cg = compile_sequence_model(&cell, &shape, 2).unwrap();
        let params = cg.init_params(&mut rng);
        let mut feed = Feed::new();
        for t in 0..shape.length {
            let mut x = vec![0.0; 2 * shape.vocab];
            x[rng.random_range(0..shape.vocab)] = 1.0;
            x[shape.vocab + rng.random_range(0..shape.vocab)] = 1.0;
            feed.insert(format!("x{t}"), Tensor::new(vec![2, shape.vocab], x).unwrap());
            if shape.scored.contains(&t) {
                let y = (0..2).map(|_| rng.random_range(0..shape.vocab) as f64).collect();
                feed.insert(format!("y{t}"), Tensor::new(vec![2], y).unwrap());
            }
        }
        let r = check_graph(&cg.graph, &params, &feed, "loss", &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{cell:?}: {r:?}");
    }
}
