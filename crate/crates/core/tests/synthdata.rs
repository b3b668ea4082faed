use periocount::protocol::{reconcile_counts, ClipAnswer};
use periocount::synthdata::{
    decode_dataset, encode_dataset, generate_corpus, split_into_clips, CorpusConfig, Profile,
};
use proptest::prelude::*;

/// Reconciled clip labels must reproduce the annotated count.
fn check_label_sums(profile: Profile, n: usize, seed: u64, cfg: &CorpusConfig, clip_len: usize) {
    let corpus = generate_corpus(profile, n, seed, cfg).unwrap();
    assert_eq!(corpus.len(), n);
    for s in &corpus {
        assert!(s.annotation.is_consistent());
        let clips = split_into_clips(&s.video, &s.annotation, clip_len, 1).unwrap();
        let answers: Vec<ClipAnswer> = clips.iter().map(|c| ClipAnswer::from(c.label)).collect();
        assert_eq!(
            reconcile_counts(&answers).unwrap(),
            s.annotation.count as u64,
            "video {:?}",
            s.video.spec
        );
    }
}

#[test]
fn label_sums_match_annotations_over_a_thousand_videos() {
    let cfg = CorpusConfig::default();
    check_label_sums(Profile::FamilyA, 1000, 11, &cfg, 32);
    check_label_sums(Profile::FamilyB, 1000, 12, &cfg, 32);
}

#[test]
fn label_sums_hold_for_long_videos_and_short_clips() {
    let cfg = CorpusConfig {
        max_frames: 160,
        ..CorpusConfig::default()
    };
    check_label_sums(Profile::All, 300, 5, &cfg, 16);
}

#[test]
fn corpus_round_trips_through_the_dataset_format() {
    let corpus = generate_corpus(Profile::All, 20, 3, &CorpusConfig::default()).unwrap();
    let back = decode_dataset(&encode_dataset(&corpus)).unwrap();
    assert_eq!(corpus, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // A cycle longer than a clip spans three clips and is joined twice, so
    // clips are at least as long as the longest cycle.
    #[test]
    fn label_sums_hold_for_any_seed(seed in any::<u64>(), clip_len in 16usize..40) {
        check_label_sums(Profile::All, 40, seed, &CorpusConfig::default(), clip_len);
    }
}
