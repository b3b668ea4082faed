use super::*;
use crate::config::RunConfig;
use crate::model::init_params;
use crate::synthdata::{generate_corpus, generate_video, CorpusConfig, MotionFamily, MotionSpec, Profile, Sample};
use proptest::prelude::*;

fn spec(cycle_count: u32, cycle_length: u32, phase_offset: u32) -> MotionSpec {
    MotionSpec {
        family: MotionFamily::OscillatingSquare,
        cycle_count,
        cycle_length,
        phase_offset,
        tail: 0,
        amplitude: 4.0,
        noise_level: 0.0,
        distractor_count: 0,
    }
}

fn sample(s: &MotionSpec) -> Sample {
    let (video, annotation) = generate_video(s, 11).unwrap();
    Sample { video, annotation }
}

const ORACLE: Counter<'static, f32> = Counter::Oracle {
    clip_len: 32,
    sample_interval: 1,
};

#[test]
fn oracle_is_exact_on_corpora() {
    for profile in [Profile::FamilyA, Profile::FamilyB] {
        let data = generate_corpus(profile, 150, 4, &CorpusConfig::default()).unwrap();
        let r = evaluate(&ORACLE, &data).unwrap();
        assert_eq!(r.obo, 1.0);
        assert_eq!(r.mae.unwrap_or(0.0), 0.0);
        assert_eq!(r.n, 150);
    }
}

#[test]
fn boundary_cycle_adds_one() {
    // cycles of 12 from frame 4: [4,16) [16,28) [28,40) [40,52), clip edge at 32
    let s = sample(&spec(4, 12, 4));
    let (count, d) = count_video(&ORACLE, &s).unwrap();
    assert_eq!(count, 4);
    assert_eq!(d.answers.len(), 2);
    assert_eq!(d.joins, 1);
    assert_eq!(d.raw[0], "[0002,0,1]");
}

#[test]
fn short_video_is_one_padded_clip() {
    let s = sample(&spec(2, 6, 1));
    let (count, d) = count_video(&ORACLE, &s).unwrap();
    assert_eq!((count, d.answers.len()), (2, 1));
}

#[test]
fn extra_cycle_raises_oracle_by_one() {
    for (n, len, off) in [(2, 7, 0), (3, 10, 5), (5, 9, 3)] {
        let a = count_video(&ORACLE, &sample(&spec(n, len, off))).unwrap().0;
        let b = count_video(&ORACLE, &sample(&spec(n + 1, len, off))).unwrap().0;
        assert_eq!(b, a + 1);
    }
}

#[test]
fn model_counting_is_deterministic() {
    let mut cfg = RunConfig::default();
    cfg.set("d_l", "32").unwrap();
    cfg.set("lm_layers", "1").unwrap();
    cfg.set("lm_ffn", "32").unwrap();
    let params = init_params::<f32>(&cfg.model_config(), 3).unwrap();
    let counter = Counter::model(&params, &cfg);
    let s = sample(&spec(5, 8, 2));
    let a = count_video(&counter, &s).unwrap();
    let b = count_video(&counter, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.raw.len(), 2);
    assert_eq!(a.1.parse_failures, a.1.raw.iter().filter(|t| crate::protocol::decode_answer(t).is_err()).count());
}

#[test]
fn report_round_trip() {
    let rows = vec![
        VideoResult { video_id: 0, gt: 3, pred: 4, parse_failures: 0 },
        VideoResult { video_id: 1, gt: 0, pred: 0, parse_failures: 1 },
        VideoResult { video_id: 2, gt: 7, pred: 5, parse_failures: 0 },
    ];
    let mut r = EvalResult::from_rows(rows, 6).unwrap();
    r.warnings.push("trained on family-b".into());
    let h = ReportHeader {
        digest: "ab12".into(),
        protocol: "cross".into(),
        train: "family-a".into(),
        test: "family-b".into(),
    };
    let text = format_report(&h, &r);
    assert_eq!(parse_report(&text).unwrap(), (h.clone(), r));
    let zero = EvalResult::from_rows(vec![VideoResult { video_id: 0, gt: 0, pred: 2, parse_failures: 0 }], 1).unwrap();
    let text = format_report(&h, &zero);
    assert!(text.contains("MAE=NA"));
    assert_eq!(parse_report(&text).unwrap().1, zero);
    assert!(parse_report("nonsense").is_err());
}

proptest! {
    #[test]
    fn metrics_permutation_invariant(v in prop::collection::vec((0u64..30, 0u64..30), 1..40), rot in 0usize..40) {
        let gts: Vec<u64> = v.iter().map(|x| x.0).collect();
        let preds: Vec<u64> = v.iter().map(|x| x.1).collect();
        let k = rot % v.len();
        let (mut g2, mut p2) = (gts.clone(), preds.clone());
        g2.rotate_left(k);
        p2.rotate_left(k);
        prop_assert_eq!(obo(&gts, &preds).unwrap(), obo(&g2, &p2).unwrap());
        let (a, b) = (mae(&gts, &preds).unwrap(), mae(&g2, &p2).unwrap());
        prop_assert_eq!(a.n, b.n);
        match (a.value, b.value) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        prop_assert_eq!(obo(&gts, &gts).unwrap(), 1.0);
        prop_assert!(mae(&gts, &gts).unwrap().value.unwrap_or(0.0) == 0.0);
    }
}
