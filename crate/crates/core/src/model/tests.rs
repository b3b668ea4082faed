use proptest::prelude::*;

use super::*;
use crate::numerics::Graph;
use crate::params::{bit_equal, GroupSet};

fn small() -> ModelConfig {
    ModelConfig {
        d_v: 16,
        m: 6,
        video_layers: 1,
        n_queries: 4,
        d_z: 16,
        periodicity_layers: 1,
        text_layers: 1,
        lm: LmConfig {
            layers: 1,
            heads: 2,
            d_l: 16,
            context_length: 48,
            ffn_hidden: 32,
        },
        lora_rank: 4,
        ..ModelConfig::default()
    }
}

fn clip(t: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed;
    Tensor::from_fn(&[t, 256], |_| {
        s = crate::synthdata::splitmix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

fn value(ctx: &Ctx<'_, f64>, v: Var) -> Tensor<f64> {
    (*ctx.g.value(v)).clone()
}

#[test]
fn pipeline_shapes() {
    let cfg = small();
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
    let f = encode_video(&mut ctx, &cfg, &clip(12, 3)).unwrap();
    assert_eq!(ctx.g.shape(f), (6, 16));
    let z = extract_periodicity(&mut ctx, &cfg, f).unwrap();
    assert_eq!(ctx.g.shape(z), (4, 16));
    let p = project_tokens(&mut ctx, z).unwrap();
    assert_eq!(ctx.g.shape(p), (4, 16));
    let e = encode_text_graph(&mut ctx, &cfg, "a ball bounces").unwrap();
    assert_eq!(ctx.g.shape(e), (1, 16));
}

#[test]
fn clip_longer_than_position_table_is_rejected() {
    let cfg = small();
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
    assert!(encode_video(&mut ctx, &cfg, &clip(cfg.max_frames + 1, 3)).is_err());
    assert!(clip_tensor::<f64>(&[0.0; 255], 16).is_err());
}

#[test]
fn text_embedding_is_unit_norm() {
    let cfg = small();
    let store = init_params::<f64>(&cfg, 2).unwrap();
    for text in ["x", "a square slides left and right, 12 times", "0123"] {
        let e = encode_text(&store, &cfg, text).unwrap();
        assert!((e.sq_norm() - 1.0).abs() < 1e-12);
    }
    assert!(encode_text(&store, &cfg, "").is_err());
}

#[test]
fn similarity_examples() {
    let e: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let same = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    assert!((similarity_values(&same, &e).unwrap() - 1.0).abs() < 1e-12);
    let orth = Tensor::from_rows(&[vec![0.0, 3.0, 0.0], vec![0.0, 0.0, -1.0]]).unwrap();
    assert!(similarity_values(&orth, &e).unwrap().abs() < 1e-12);
    // rows at cosines 0.2, -0.5 and 0.9 to e
    let rows: Vec<Vec<f64>> = [0.2f64, -0.5, 0.9]
        .iter()
        .map(|&c| vec![c, (1.0 - c * c).sqrt(), 0.0])
        .collect();
    let z = Tensor::from_rows(&rows).unwrap();
    assert!((similarity_values(&z, &e).unwrap() - 0.9).abs() < 1e-12);
}

#[test]
fn projector_is_affine_and_zero_maps_to_bias() {
    let cfg = small();
    let store = init_params::<f64>(&cfg, 4).unwrap();
    let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
    let zero = ctx.g.constant(Tensor::zeros(&[3, 16])).unwrap();
    let p0 = project_tokens(&mut ctx, zero).unwrap();
    let bias = store.get("proj.b").unwrap();
    let p0 = value(&ctx, p0);
    for r in 0..3 {
        assert_eq!(p0.row(r), bias.row(0));
    }
    let a = clip(3, 1).reshape(&[12, 64]).unwrap();
    let a = Tensor::new(vec![3, 16], a.data()[..48].to_vec()).unwrap();
    let b = a.map(|x| 1.0 - 2.0 * x);
    let sum = Tensor::new(vec![3, 16], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
    let mut out = Vec::new();
    for t in [a, b, sum] {
        let v = ctx.g.constant(t).unwrap();
        let p = project_tokens(&mut ctx, v).unwrap();
        out.push(value(&ctx, p));
    }
    // P(a + b) = P(a) + P(b) - P(0)
    for i in 0..48 {
        let lhs = out[2].data()[i];
        let rhs = out[0].data()[i] + out[1].data()[i] - p0.data()[i];
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn zero_initialised_adapters_leave_outputs_bit_identical() {
    let cfg = small();
    let plain = ModelConfig {
        video_adapters: false,
        lm_adapters: false,
        ..cfg.clone()
    };
    let store = init_params::<f64>(&cfg, 5).unwrap();
    let x = clip(10, 9);
    let run = |c: &ModelConfig| {
        let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
        let p = periodic_tokens(&mut ctx, c, &x).unwrap();
        let h = crate::lm::lm_hidden(&mut ctx, &c.lm, Some(p), &[1, 7, 9], c.lm_lora()).unwrap();
        (value(&ctx, p), value(&ctx, h))
    };
    let (pa, ha) = run(&cfg);
    let (pb, hb) = run(&plain);
    assert!(bit_equal(&pa, &pb));
    assert!(bit_equal(&ha, &hb));
}

#[test]
fn init_is_seeded() {
    let cfg = small();
    let a = init_params::<f64>(&cfg, 8).unwrap();
    let b = init_params::<f64>(&cfg, 8).unwrap();
    let c = init_params::<f64>(&cfg, 9).unwrap();
    assert!(a.groups_equal(&b, GroupSet::EMPTY.complement()));
    assert!(!a.groups_equal(&c, GroupSet::of(&[Group::Periodicity])));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn queries_ignore_feature_order_without_positions(seed in any::<u64>(), shift in 1usize..6) {
        let cfg = ModelConfig { feature_pos: false, ..small() };
        let store = init_params::<f64>(&cfg, seed).unwrap();
        let feats = clip(1, seed).reshape(&[16, 16]).unwrap();
        let feats = Tensor::new(vec![6, 16], feats.data()[..96].to_vec()).unwrap();
        let rolled: Vec<f64> = (0..6).flat_map(|r| feats.row((r + shift) % 6).to_vec()).collect();
        let rolled = Tensor::new(vec![6, 16], rolled).unwrap();
        let mut outs = Vec::new();
        for f in [feats, rolled] {
            let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
            let v = ctx.g.constant(f).unwrap();
            let z = extract_periodicity(&mut ctx, &cfg, v).unwrap();
            outs.push(value(&ctx, z));
        }
        for (a, b) in outs[0].data().iter().zip(outs[1].data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn similarity_is_bounded(seed in any::<u64>()) {
        let z = clip(1, seed).reshape(&[16, 16]).unwrap().map(|x| x - 0.5);
        let e = Tensor::new(vec![1, 16], clip(1, seed ^ 1).data()[..16].to_vec()).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z).unwrap();
        let ev = g.constant(e).unwrap();
        let s = similarity_g(&mut g, zv, ev).unwrap();
        let s = g.value(s).item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }
}
