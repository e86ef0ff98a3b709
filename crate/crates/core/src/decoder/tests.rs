use super::*;
use crate::scene::{synth_scene, SynthConfig};

fn small_scene(seed: u64) -> Scene {
    let cfg = SynthConfig {
        seed,
        boxes_min: 2,
        boxes_max: 3,
        points_per_box_min: 30,
        points_per_box_max: 40,
        background_points: 20,
        ..SynthConfig::default()
    };
    synth_scene(&cfg, 0).unwrap()
}

fn config(layers: usize, refine_every: usize) -> DecoderConfig {
    DecoderConfig {
        queries: 4,
        width: 8,
        heads: 2,
        layers,
        refine_every,
        ..DecoderConfig::default()
    }
}

#[test]
fn refinement_schedule() {
    let scene = small_scene(1);
    let m = Model::new(config(6, 3), 0).unwrap();
    let out = decoder_forward(&scene, &m).unwrap();
    assert_eq!(out.refinements, 2);
    assert_eq!(m.config().refinement_layers(), vec![3, 6]);
    assert_eq!(out.predictions.len(), 7);
    assert_eq!(out.taps.len(), 3);

    let m = Model::new(config(2, 6), 0).unwrap();
    let out = decoder_forward(&scene, &m).unwrap();
    assert_eq!(out.refinements, 0);
    assert_eq!(out.predictions.len(), 3);
}

#[test]
fn shapes_finiteness_and_bounds() {
    let scene = small_scene(2);
    let m = Model::new(config(3, 1), 4).unwrap();
    let out = decoder_forward(&scene, &m).unwrap();
    let (lo, hi) = scene.bounds();
    for p in &out.predictions {
        assert_eq!(p.class_logits.shape(), &[4, scene.category_count() + 1]);
        assert_eq!(p.mask_logits.shape(), &[4, scene.superpoint_count()]);
        assert_eq!(p.score.len(), 4);
        assert_eq!(p.center.len(), 4);
        assert!(p.is_finite());
        assert!(p.score.iter().all(|s| (0.0..=1.0).contains(s)));
        for c in &p.center {
            for a in 0..3 {
                assert!(c[a] >= lo[a] && c[a] <= hi[a]);
            }
        }
    }
    assert_eq!(out.self_attention.len(), 3);
    assert_eq!(out.self_attention[0].shape(), &[2, 4, 4]);
}

#[test]
fn forward_is_deterministic() {
    let scene = small_scene(3);
    let a = decoder_forward(&scene, &Model::new(config(6, 3), 9).unwrap()).unwrap();
    let b = decoder_forward(&scene, &Model::new(config(6, 3), 9).unwrap()).unwrap();
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn encoder_examples() {
    let scene = small_scene(4);
    let mut m = Model::new(config(1, 1), 0).unwrap();
    let f = encode_points(&scene, &m.encoder).unwrap();
    assert_eq!(f.shape(), &[scene.len(), 8]);
    m.encoder.zero();
    assert!(encode_points(&scene, &m.encoder).unwrap().data().iter().all(|&v| v == 0.0));

    let twin = Scene::new(vec![[1.0, 2.0, 3.0]; 2], None, None, vec![0, 0], vec![-1; 2], vec![-1; 2], 1).unwrap();
    let m = Model::new(config(1, 1), 0).unwrap();
    let f = encode_points(&twin, &m.encoder).unwrap();
    assert_eq!(f.row(0), f.row(1));
}

#[test]
fn query_positions_follow_scene_bounds() {
    let mut m = Model::new(config(1, 1), 0).unwrap();
    m.query_unit.set(Tensor::full(&[4, 3], 0.5)).unwrap();
    let q = init_queries(&m, [0.0; 3], [2.0; 3]);
    assert!(q.position_world.data().iter().all(|&v| v == 1.0));
    let q = init_queries(&m, [0.7; 3], [0.7; 3]);
    assert!(q.position_world.data().iter().all(|&v| v == 0.7));

    let a = Model::new(config(1, 1), 1).unwrap();
    let b = Model::new(config(1, 1), 1).unwrap();
    let c = Model::new(config(1, 1), 2).unwrap();
    assert_eq!(a.query_unit, b.query_unit);
    assert_ne!(a.query_unit, c.query_unit);
    assert!(a.query_unit.value().data().iter().all(|v| (0.0..1.0).contains(v)));
}

#[test]
fn mask_attention_fallbacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::new(config(1, 1), 5).unwrap();
    let layer = &m.layers[0];
    let q = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let world = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let f = Tensor::uniform(&[6, 8], 1.0, &mut rng);
    let cents = Tensor::uniform(&[6, 3], 1.0, &mut rng);
    let ones = mask_attention(layer, &q, &world, &f, &cents, &Tensor::full(&[4, 6], 1.0), 16, 0.5).unwrap();
    let zeros = mask_attention(layer, &q, &world, &f, &cents, &Tensor::zeros(&[4, 6]), 16, 0.5).unwrap();
    assert_eq!(ones, zeros);

    // A single superpoint: the attended value is that superpoint's value.
    let f1 = Tensor::uniform(&[1, 8], 1.0, &mut rng);
    let c1 = Tensor::uniform(&[1, 3], 1.0, &mut rng);
    let a = mask_attention(layer, &q, &world, &f1, &c1, &Tensor::zeros(&[4, 1]), 16, 0.5).unwrap();
    let b = mask_attention(layer, &q, &world, &f1, &c1, &Tensor::full(&[4, 1], 1.0), 16, 0.5).unwrap();
    assert_eq!(a, b);
    let mut g = Graph::inference();
    let fv = g.constant(f1);
    let v = layer.cross.value.forward(&mut g, fv).unwrap();
    let o = layer.cross.output.forward(&mut g, v).unwrap();
    for k in 0..4 {
        let r: Vec<f64> = (0..8).map(|e| q.get2(k, e) + g.value(o).data()[e]).collect();
        let mean = r.iter().sum::<f64>() / 8.0;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        for e in 0..8 {
            let want = (r[e] - mean) / (var + crate::numerics::nn::LN_EPS).sqrt();
            assert!((a.get2(k, e) - want).abs() <= 1e-12);
        }
    }
}

fn refine_oracle(block: &RefineBlock, f: &Tensor, q: &Tensor) -> Tensor {
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        (0..l.out_dim())
            .map(|o| l.bias.value().data()[o] + x.iter().enumerate().map(|(i, v)| v * l.weight.value().get2(i, o)).sum::<f64>())
            .collect()
    };
    let ln = |r: Vec<f64>| -> Vec<f64> {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        r.iter().map(|x| (x - mean) / (var + crate::numerics::nn::LN_EPS).sqrt()).collect()
    };
    let a = &block.attention;
    let (m, k, c) = (f.rows(), q.rows(), f.cols());
    let hc = c / a.heads;
    let qs: Vec<Vec<f64>> = (0..m).map(|i| lin(&a.query, f.row(i))).collect();
    let ks: Vec<Vec<f64>> = (0..k).map(|j| lin(&a.key, q.row(j))).collect();
    let vs: Vec<Vec<f64>> = (0..k).map(|j| lin(&a.value, q.row(j))).collect();
    let mut rows = Vec::new();
    for i in 0..m {
        let mut merged = vec![0.0; c];
        for h in 0..a.heads {
            let logits: Vec<f64> = (0..k)
                .map(|j| (0..hc).map(|e| qs[i][h * hc + e] * ks[j][h * hc + e]).sum::<f64>() / (hc as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for j in 0..k {
                let w = (logits[j] - top).exp() / z;
                for e in 0..hc {
                    merged[h * hc + e] += w * vs[j][h * hc + e];
                }
            }
        }
        let o = lin(&a.output, &merged);
        let x = ln((0..c).map(|e| f.get2(i, e) + o[e]).collect());
        let hidden: Vec<f64> = lin(&block.ffn.up, &x).into_iter().map(|v| v.max(0.0)).collect();
        let d = lin(&block.ffn.down, &hidden);
        rows.push(ln((0..c).map(|e| x[e] + d[e]).collect()));
    }
    Tensor::from_rows(&rows)
}

#[test]
fn refine_matches_loop_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::new(config(3, 1), seed).unwrap();
        let f = Tensor::uniform(&[6, 8], 1.0, &mut rng);
        let q = Tensor::uniform(&[4, 8], 1.0, &mut rng);
        let got = superpoint_refine(&m.refine[0], &f, &q).unwrap();
        assert!(got.max_abs_diff(&refine_oracle(&m.refine[0], &f, &q)) <= 1e-10);
    }
}

#[test]
fn refine_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Model::new(config(1, 1), 6).unwrap();
    let f = Tensor::uniform(&[6, 8], 1.0, &mut rng);

    // One query: every superpoint receives the same attended value.
    let q1 = Tensor::uniform(&[1, 8], 1.0, &mut rng);
    let block = &m.refine[0];
    let mut g = Graph::inference();
    let fv = g.constant(f.clone());
    let qv = g.constant(q1);
    let att = block.attention.forward(&mut g, fv, None, qv, None, None).unwrap();
    assert!(g.attention_probs(att.attention).unwrap().data().iter().all(|&p| p == 1.0));
    let attended = g.value(att.attention).data();
    let hc = 8 / block.attention.heads;
    for h in 0..block.attention.heads {
        let head = &attended[h * 6 * hc..(h + 1) * 6 * hc];
        for i in 1..6 {
            assert_eq!(&head[i * hc..(i + 1) * hc], &head[..hc]);
        }
    }

    // Zero value projection: only the residual path and the output bias remain.
    let mut block = m.refine[0].clone();
    block.attention.value.zero();
    let q = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let got = superpoint_refine(&block, &f, &q).unwrap();
    let mut g = Graph::inference();
    let fv = g.constant(f.clone());
    let b = g.param(&block.attention.output.bias);
    let shifted = g.add_row(fv, b).unwrap();
    let normed = block.attention.norm.forward(&mut g, shifted).unwrap();
    let want = block.ffn.forward(&mut g, normed).unwrap();
    assert!(got.max_abs_diff(g.value(want)) <= 1e-12);
}

#[test]
fn head_examples() {
    let m = Model::new(config(1, 1), 7).unwrap();
    let mut heads = m.heads.clone();
    heads.mask.zero();
    for e in 0..8 {
        heads.mask.weight.value_mut().data_mut()[e * 8 + e] = 1.0;
    }
    let mut q = vec![0.0; 8];
    q[0] = 1.0;
    let mut orth = vec![0.0; 8];
    orth[1] = 1.0;
    let queries = Tensor::from_rows(&[q.clone()]);
    let world = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]);
    let p = predict_heads(&heads, &queries, &Tensor::from_rows(&[orth.clone(), orth]), &world).unwrap();
    assert_eq!(p.mask_logits.data(), &[0.0, 0.0]);
    assert_eq!(p.mask_probs(0), vec![0.5, 0.5]);
    let p = predict_heads(&heads, &queries, &Tensor::from_rows(&[q]), &world).unwrap();
    assert_eq!(p.mask_logits.data(), &[1.0]);
    assert_eq!(p.center, vec![[0.1, 0.2, 0.3]]);
    assert_eq!(p.class_logits.shape(), &[1, 5]);
}

#[test]
fn zero_relation_bias_without_refinement_equals_plain_decoder() {
    let scene = small_scene(8);
    let mut m = Model::new(config(3, 4), 8).unwrap();
    m.layers.iter_mut().for_each(|l| l.rsa.relation.zero());
    let plain = m.clone().with_switches(true, false, false);
    let a = decoder_forward(&scene, &m).unwrap();
    let b = decoder_forward(&scene, &plain).unwrap();
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn one_layer_decoder_gradient() {
    for seed in 0..3 {
        for report in crate::gradsuite::decoder_checks(seed).unwrap() {
            assert!(report.passed, "seed {seed} {}: {}", report.name, report.max_rel_error);
        }
    }
}

