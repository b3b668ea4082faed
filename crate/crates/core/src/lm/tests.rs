use super::*;
use crate::model::{init_params, ModelConfig};
use crate::numerics::Tensor;
use crate::params::{Ctx, GroupSet, Init, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> (LmConfig, ParamStore<f64>) {
    let cfg = LmConfig {
        layers: 2,
        heads: 2,
        d_l: 16,
        context_length: 40,
        ffn_hidden: 24,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    register(&mut store, &mut init, &cfg, None, false).unwrap();
    (cfg, store)
}

fn logits(store: &ParamStore<f64>, cfg: &LmConfig, p: &Tensor<f64>, ids: &[usize]) -> Tensor<f64> {
    let mut ctx = Ctx::new(store, GroupSet::EMPTY);
    let pv = ctx.g.constant(p.clone()).unwrap();
    let y = lm_forward(&mut ctx, cfg, Some(pv), ids, None).unwrap();
    ctx.g.value(y).clone()
}

#[test]
fn logits_are_causal() {
    let (cfg, store) = small();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut init = Init { rng: &mut rng };
    let p: Tensor<f64> = init.normal(3, cfg.d_l, 1.0);
    let ids = tokenize("count me in").unwrap();
    let base = logits(&store, &cfg, &p, &ids);
    assert_eq!(base.shape(), &[3 + ids.len(), VOCAB_SIZE]);
    for cut in [0, 4, ids.len() - 1] {
        let mut changed = ids.clone();
        for id in changed.iter_mut().skip(cut + 1) {
            *id = (*id + 7) % VOCAB_SIZE;
        }
        let other = logits(&store, &cfg, &p, &changed);
        for r in 0..=3 + cut {
            assert_eq!(base.row(r), other.row(r), "row {r} moved after change past {cut}");
        }
        if cut + 1 < ids.len() {
            assert_ne!(base.row(3 + cut + 1), other.row(3 + cut + 1));
        }
    }
}

#[test]
fn generation_edge_cases() {
    let (cfg, store) = small();
    let prompt = tokenize("how many?").unwrap();
    assert!(generate(&store, &cfg, None, &prompt, 0, None).unwrap().is_empty());
    assert!(generate_cached(&store, &cfg, None, &prompt, 0, None).unwrap().is_empty());
    let a = generate(&store, &cfg, None, &prompt, 12, None).unwrap();
    let b = generate(&store, &cfg, None, &prompt, 12, None).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 12);
    let long = vec![id_of('a').unwrap(); cfg.context_length];
    assert!(generate_cached(&store, &cfg, None, &long, 5, None).unwrap().is_empty());
}

#[test]
fn cached_decoder_matches_full_recompute() {
    let (cfg, store) = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut init = Init { rng: &mut rng };
    let p: Tensor<f64> = init.normal(4, cfg.d_l, 1.0);
    let ids = tokenize("abc, def").unwrap();
    let full = logits(&store, &cfg, &p, &ids);
    let mut dec = KvDecoder::new(&store, &cfg, None);
    let first = dec.feed(Some(&p), &ids[..3]).unwrap();
    for (a, b) in first.data().iter().zip(full.row(4 + 2)) {
        assert!((a - b).abs() < 1e-10);
    }
    for (j, &id) in ids.iter().enumerate().skip(3) {
        let step = dec.feed(None, &[id]).unwrap();
        for (a, b) in step.data().iter().zip(full.row(4 + j)) {
            assert!((a - b).abs() < 1e-10, "position {j}: {a} vs {b}");
        }
    }
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let p: Tensor<f64> = init.normal(4, cfg.d_l, 2.0);
        let a = generate(&store, &cfg, Some(&p), &ids, 30, None).unwrap();
        let b = generate_cached(&store, &cfg, Some(&p), &ids, 30, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn model_lm_with_count_tokens() {
    let mut mc = ModelConfig::default();
    mc.count_tokens = true;
    let store = init_params::<f32>(&mc, 1).unwrap();
    let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
    let ids = [BOS, id_of('[').unwrap(), COUNT_TOKEN_BASE + 7, id_of(']').unwrap()];
    let y = lm_forward(&mut ctx, &mc.lm, None, &ids, mc.lm_lora()).unwrap();
    assert_eq!(ctx.g.shape(y), (4, VOCAB_SIZE + COUNT_TOKENS));
}

#[test]
fn context_overflow_is_an_error() {
    let (cfg, store) = small();
    let mut ctx = Ctx::new(&store, GroupSet::EMPTY);
    let ids = vec![BOS; cfg.context_length + 1];
    assert!(matches!(
        lm_forward(&mut ctx, &cfg, None, &ids, None),
        Err(crate::Error::Length { .. })
    ));
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0f64; 5]), 0);
}
