//! Finite-difference checks of every differentiable operation, the model
//! blocks built from them, and the three training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lm::{lm_hidden, logits_at, LmConfig};
use crate::model::layers::{encoder_layer, multi_head};
use crate::model::{encode_text_graph, encode_video, extract_periodicity, init_params, ModelConfig};
use crate::numerics::{attention, relative_error, GradChecker, Graph, OpKind, Tensor, Var};
use crate::params::{Ctx, GradBuffer, Group, GroupSet, ParamStore};
use crate::training::{loss_llm, loss_ptc, loss_vtc};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Outcome of one named check over several random draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    /// Set when a case could not be evaluated.
    pub error: Option<String>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err < TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        u + v
    })
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct upstream gradient.
fn weigh(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = g.constant(normal(rng, r, c))?;
    let m = g.mul(y, w)?;
    g.sum_all(m)
}

type InputCase = Box<dyn Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>>;

/// A function of leaf inputs with the shapes to draw them at.
struct InputCheck {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    /// Maps raw normal draws into the function's domain.
    prepare: fn(usize, Tensor<f64>) -> Tensor<f64>,
    f: InputCase,
}

fn keep(_: usize, t: Tensor<f64>) -> Tensor<f64> {
    t
}

fn input_checks() -> Vec<InputCheck> {
    fn c(
        name: &'static str,
        shapes: &[(usize, usize)],
        f: impl Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var> + 'static,
    ) -> InputCheck {
        InputCheck {
            name,
            shapes: shapes.to_vec(),
            prepare: keep,
            f: Box::new(f),
        }
    }
    let mut v = vec![
        c("matmul", &[(3, 4), (4, 2)], |g, x, r| {
            let y = g.matmul(x[0], x[1])?;
            weigh(g, y, r)
        }),
        c("matmul_transposed", &[(4, 3), (2, 4)], |g, x, r| {
            let y = g.matmul_ext(x[0], x[1], true, true, 0.7)?;
            weigh(g, y, r)
        }),
        c("add", &[(3, 4), (3, 4)], |g, x, r| {
            let y = g.add(x[0], x[1])?;
            weigh(g, y, r)
        }),
        c("add_row", &[(3, 4), (1, 4)], |g, x, r| {
            let y = g.add_row(x[0], x[1])?;
            weigh(g, y, r)
        }),
        c("mul", &[(3, 4), (3, 4)], |g, x, r| {
            let y = g.mul(x[0], x[1])?;
            weigh(g, y, r)
        }),
        c("scale", &[(3, 4)], |g, x, r| {
            let y = g.scale(x[0], -1.3)?;
            weigh(g, y, r)
        }),
        c("gelu", &[(3, 4)], |g, x, r| {
            let y = g.gelu(x[0])?;
            weigh(g, y, r)
        }),
        c("sigmoid", &[(3, 4)], |g, x, r| {
            let y = g.sigmoid(x[0])?;
            weigh(g, y, r)
        }),
        c("softmax", &[(3, 5)], |g, x, r| {
            let y = g.softmax(x[0])?;
            weigh(g, y, r)
        }),
        c("softmax_causal", &[(4, 4)], |g, x, r| {
            let y = g.softmax_masked(x[0], true)?;
            weigh(g, y, r)
        }),
        c("softmax_cross_entropy", &[(4, 6)], |g, x, r| {
            let t: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            g.softmax_cross_entropy(x[0], &t)
        }),
        c("cross_entropy", &[(3, 5)], |g, x, r| {
            let p = g.softmax(x[0])?;
            let t = Tensor::from_fn(&[3, 5], |_| r.random_range(0.0..1.0));
            g.cross_entropy(p, t)
        }),
        c("binary_cross_entropy", &[(5, 1)], |g, x, r| {
            let s = g.sigmoid(x[0])?;
            let y: Vec<f64> = (0..5).map(|_| r.random_range(0..2) as f64).collect();
            g.binary_cross_entropy(s, &y)
        }),
        c("layer_norm", &[(3, 6), (1, 6), (1, 6)], |g, x, r| {
            let y = g.layer_norm(x[0], x[1], x[2])?;
            weigh(g, y, r)
        }),
        c("gather", &[(5, 3)], |g, x, r| {
            let y = g.gather(x[0], &[4, 0, 4, 2])?;
            weigh(g, y, r)
        }),
        c("concat_rows", &[(2, 3), (3, 3)], |g, x, r| {
            let y = g.concat_rows(&[x[0], x[1], x[0]])?;
            weigh(g, y, r)
        }),
        c("concat_cols", &[(3, 2), (3, 1)], |g, x, r| {
            let y = g.concat_cols(&[x[1], x[0]])?;
            weigh(g, y, r)
        }),
        c("slice_rows", &[(5, 3)], |g, x, r| {
            let y = g.slice_rows(x[0], 1, 3)?;
            weigh(g, y, r)
        }),
        c("slice_cols", &[(3, 5)], |g, x, r| {
            let y = g.slice_cols(x[0], 2, 2)?;
            weigh(g, y, r)
        }),
        c("segment_mean", &[(6, 3)], |g, x, r| {
            let y = g.segment_mean(x[0], 3)?;
            weigh(g, y, r)
        }),
        c("sum_all", &[(3, 4)], |g, x, _| g.sum_all(x[0])),
        c("mean_all", &[(3, 4)], |g, x, _| g.mean_all(x[0])),
        c("cosine_sim", &[(3, 4), (2, 4)], |g, x, r| {
            let y = g.cosine_sim(x[0], x[1])?;
            weigh(g, y, r)
        }),
        c("max_over_rows", &[(4, 3)], |g, x, r| {
            let y = g.max_over_rows(x[0])?;
            weigh(g, y, r)
        }),
        c("transpose", &[(3, 4)], |g, x, r| {
            let y = g.transpose(x[0])?;
            weigh(g, y, r)
        }),
        c("reshape", &[(3, 4)], |g, x, r| {
            let y = g.reshape(x[0], 2, 6)?;
            weigh(g, y, r)
        }),
        c("attention", &[(3, 4), (5, 4), (5, 2)], |g, x, r| {
            let y = attention(g, x[0], x[1], x[2], false)?;
            weigh(g, y, r)
        }),
        c("attention_causal", &[(4, 4), (4, 4), (4, 3)], |g, x, r| {
            let y = attention(g, x[0], x[1], x[2], true)?;
            weigh(g, y, r)
        }),
        c("loss_vtc", &[(3, 4), (3, 4), (3, 4), (3, 4)], |g, x, _| {
            let tau = g.constant(Tensor::full(&[1, 1], 0.3))?;
            loss_vtc(g, &x[..3], x[3], tau)
        }),
        c("loss_ptc", &[(3, 4), (2, 4), (1, 4)], |g, x, _| loss_ptc(g, &x[..2], x[2], &[true, false])),
        c("loss_llm", &[(10, 48)], |g, x, r| {
            let t: Vec<usize> = (0..10).map(|_| r.random_range(0..48)).collect();
            loss_llm(g, x[0], &t)
        }),
    ];
    v.push(InputCheck {
        name: "div_scalar",
        shapes: vec![(3, 4), (1, 1)],
        prepare: |i, t| if i == 1 { t.map(|x| 0.5 + x.abs()) } else { t },
        f: Box::new(|g, x, r| {
            let y = g.div_scalar(x[0], x[1])?;
            weigh(g, y, r)
        }),
    });
    v.push(InputCheck {
        name: "tau",
        shapes: vec![(3, 4), (3, 4), (3, 4), (3, 4), (1, 1)],
        prepare: |i, t| if i == 4 { t.map(|x| 0.05 + 0.2 * x.abs()) } else { t },
        f: Box::new(|g, x, _| loss_vtc(g, &x[..3], x[3], x[4])),
    });
    v
}

/// Central differences over the parameters of `groups` in `store`.
fn check_params<F>(
    store: &ParamStore<f64>,
    groups: GroupSet,
    sign_flip: Option<OpKind>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let graph = match sign_flip {
        Some(k) => Graph::with_sign_flip(k),
        None => Graph::new(),
    };
    let mut ctx = Ctx::with_graph(graph, store, groups);
    let out = f(&mut ctx)?;
    let mut grads = ctx.g.backward(out)?;
    let mut buf = GradBuffer::new(store.len());
    ctx.collect(&mut grads, &mut buf);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut c = Ctx::new(s, GroupSet::EMPTY);
        let y = f(&mut c)?;
        Ok(c.g.value(y).item())
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids_in(groups) {
        let base = (**store.value(id)).clone();
        for j in 0..base.len() {
            let analytic = buf.get(id).map_or(0.0, |t| t.data()[j]);
            let mut t = base.clone();
            t.data_mut()[j] += EPS;
            probe.set(id, t)?;
            let up = eval(&probe)?;
            let mut t = base.clone();
            t.data_mut()[j] -= EPS;
            probe.set(id, t)?;
            let down = eval(&probe)?;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * EPS)));
        }
        probe.set(id, base)?;
    }
    Ok(worst)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        frame_size: 8,
        patch: 4,
        max_frames: 6,
        d_v: 8,
        m: 3,
        video_layers: 1,
        video_heads: 2,
        n_queries: 3,
        d_z: 8,
        periodicity_layers: 1,
        periodicity_heads: 2,
        feature_pos: true,
        text_layers: 1,
        text_heads: 2,
        max_text_len: 16,
        lm: LmConfig {
            layers: 1,
            heads: 2,
            d_l: 8,
            context_length: 16,
            ffn_hidden: 12,
        },
        lora_rank: 2,
        lora_scale: 0.5,
        video_adapters: true,
        lm_adapters: true,
        count_tokens: false,
    }
}

/// A small model with every adapter switched on and nonzero.
fn tiny_store(seed: u64) -> Result<(ModelConfig, ParamStore<f64>)> {
    let cfg = tiny_model();
    let mut store = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".lora_b") {
            let (r, c) = (store.value(id).rows(), store.value(id).cols());
            store.set(id, normal(&mut rng, r, c).map(|x| 0.5 * x))?;
        }
    }
    Ok((cfg, store))
}

type ParamCase = fn(&mut Ctx<'_, f64>, &ModelConfig, &mut ChaCha8Rng) -> Result<Var>;

fn param_checks() -> Vec<(&'static str, GroupSet, ParamCase)> {
    vec![
        ("encoder_layer", GroupSet::of(&[Group::TextEncoder]), |ctx, _, r| {
            let x = ctx.g.constant(normal(r, 4, 8))?;
            let y = encoder_layer(ctx, x, "text.l0", 2, false, None)?;
            weigh(&mut ctx.g, y, r)
        }),
        ("cross_attention", GroupSet::of(&[Group::Periodicity]), |ctx, _, r| {
            let q = ctx.g.constant(normal(r, 3, 8))?;
            let kv = ctx.g.constant(normal(r, 5, 8))?;
            let y = multi_head(ctx, q, kv, "per.l0.ca", 2, false, None)?;
            weigh(&mut ctx.g, y, r)
        }),
        ("video_encoder_adapters", GroupSet::of(&[Group::VideoAdapter]), |ctx, cfg, r| {
            let clip = Tensor::from_fn(&[5, 64], |_| r.random_range(0.0..1.0));
            let y = encode_video(ctx, cfg, &clip)?;
            weigh(&mut ctx.g, y, r)
        }),
        ("periodicity_transformer", GroupSet::of(&[Group::Periodicity]), |ctx, cfg, r| {
            let f = ctx.g.constant(normal(r, 3, 8))?;
            let y = extract_periodicity(ctx, cfg, f)?;
            weigh(&mut ctx.g, y, r)
        }),
        ("text_encoder", GroupSet::of(&[Group::TextEncoder]), |ctx, cfg, r| {
            let y = encode_text_graph(ctx, cfg, "a ball, twice")?;
            weigh(&mut ctx.g, y, r)
        }),
        (
            "lm_decoder_adapters",
            GroupSet::of(&[Group::LmAdapter, Group::Projector]),
            |ctx, cfg, r| {
                let z = ctx.g.constant(normal(r, 3, 8))?;
                let p = crate::model::project_tokens(ctx, z)?;
                let ids = [1, 20, 5, 9, 30];
                let h = lm_hidden(ctx, &cfg.lm, Some(p), &ids, cfg.lm_lora())?;
                let logits = logits_at(ctx, h, &[5, 6, 7])?;
                let t: Vec<usize> = (0..3).map(|_| r.random_range(0..48)).collect();
                loss_llm(&mut ctx.g, logits, &t)
            },
        ),
        ("lm_base", GroupSet::of(&[Group::LmBase]), |ctx, cfg, r| {
            let ids = [1, 20, 5, 9];
            let h = lm_hidden(ctx, &cfg.lm, None, &ids, cfg.lm_lora())?;
            let logits = logits_at(ctx, h, &[1, 2, 3])?;
            let t: Vec<usize> = (0..3).map(|_| r.random_range(0..48)).collect();
            loss_llm(&mut ctx.g, logits, &t)
        }),
    ]
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<&'static str> {
    input_checks()
        .iter()
        .map(|c| c.name)
        .chain(param_checks().iter().map(|c| c.0))
        .collect()
}

/// Runs every check `cases` times with fresh random draws. With
/// `sign_flip`, the backward rule of that operation is negated.
pub fn run_suite(cases: usize, seed: u64, sign_flip: Option<OpKind>) -> Vec<SuiteRow> {
    let checker = GradChecker::new(EPS).with_sign_flip(sign_flip);
    let mut rows = Vec::new();
    for (ci, check) in input_checks().into_iter().enumerate() {
        let mut row = SuiteRow {
            name: check.name.into(),
            cases,
            max_rel_err: 0.0,
            error: None,
        };
        for case in 0..cases {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 20) ^ case as u64);
            let inputs: Vec<Tensor<f64>> = check
                .shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| (check.prepare)(i, normal(&mut rng, r, c)))
                .collect();
            let state = rng.random::<u64>();
            let f = |g: &mut Graph<f64>, x: &[Var]| (check.f)(g, x, &mut ChaCha8Rng::seed_from_u64(state));
            match checker.check(f, &inputs) {
                Ok(e) => row.max_rel_err = row.max_rel_err.max(e),
                Err(e) => row.error = Some(e.to_string()),
            }
        }
        rows.push(row);
    }
    for (ci, (name, groups, f)) in param_checks().into_iter().enumerate() {
        let mut row = SuiteRow {
            name: name.into(),
            cases,
            max_rel_err: 0.0,
            error: None,
        };
        for case in 0..cases {
            let s = seed ^ ((100 + ci as u64) << 20) ^ case as u64;
            let res = tiny_store(s).and_then(|(cfg, store)| {
                let state = ChaCha8Rng::seed_from_u64(s).random::<u64>();
                check_params(&store, groups, sign_flip, |ctx| {
                    f(ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(state))
                })
            });
            match res {
                Ok(e) => row.max_rel_err = row.max_rel_err.max(e),
                Err(e) => row.error = Some(e.to_string()),
            }
        }
        rows.push(row);
    }
    rows
}
