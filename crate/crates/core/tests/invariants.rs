use proptest::prelude::*;

use safer_core::context::PlaceInfo;
use safer_core::curation::{ConsensusRule, Decision, Verdict};
use safer_core::fusion::{assemble, predict, softmax, ClassifierParams, FeatureBundle, FeatureDims, StreamMask};
use safer_core::geometry::synth::{Expression, Pose, SyntheticFace};
use safer_core::geometry::{
    au_features, interocular_distance, select_au_centers, visible_features, Vec2, AU_FEATURE_LEN,
    VISIBLE_FEATURE_LEN,
};
use safer_core::{DatasetManifest, EmotionLabel, SampleRecord, Split};

fn face_strategy() -> impl Strategy<Value = SyntheticFace> {
    (0.6f64..1.4, 0.0f64..0.5, 0.5f64..1.5, -0.2f64..0.3, -0.2f64..0.2).prop_map(|(mw, mo, eo, br, sm)| SyntheticFace {
        pose: Pose::default(),
        expression: Expression {
            mouth_width: mw,
            mouth_open: mo,
            eye_open: eo,
            brow_raise: br,
            smile: sm,
        },
    })
}

fn verdict_strategy() -> impl Strategy<Value = Verdict> {
    (0usize..8).prop_map(|i| match EmotionLabel::from_code(i) {
        Some(l) => Verdict::Emotion(l),
        None => Verdict::Irrelevant,
    })
}

fn bundle(dims: FeatureDims, vals: &[f64]) -> FeatureBundle {
    let mut it = vals.iter().copied().cycle();
    let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<_>>();
    FeatureBundle {
        visible: take(VISIBLE_FEATURE_LEN),
        au: take(AU_FEATURE_LEN),
        face_deep: take(dims.face_deep),
        background: take(dims.background),
        place: take(dims.place),
        place_info: PlaceInfo::new("room", vec![], 0.5).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geometry_is_similarity_invariant(
        face in face_strategy(),
        scale in 0.2f64..5.0,
        angle in -3.1f64..3.1,
        tx in -100.0f64..100.0,
        ty in -100.0f64..100.0,
    ) {
        let mesh = face.mesh();
        let (s, c) = angle.sin_cos();
        let moved = mesh.map_points(|p| Vec2::new(scale * (c * p.x - s * p.y) + tx, scale * (s * p.x + c * p.y) + ty));
        let a = visible_features(&mesh).unwrap();
        let b = visible_features(&moved).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        let au = |m| au_features(&select_au_centers(m).unwrap(), interocular_distance(m).unwrap()).unwrap();
        for (x, y) in au(&mesh).as_slice().iter().zip(au(&moved).as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn manifest_round_trips(rows in prop::collection::vec((prop::option::of(0usize..7), 0usize..4, any::<bool>(), any::<bool>()), 0..30)) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (label, split, tagged, masked))| {
                let mut r = SampleRecord::new(format!("id{i}"), format!("img/{i}.png"));
                r.label = label.and_then(EmotionLabel::from_code);
                if r.label.is_some() {
                    r.split = [Split::Train, Split::Val, Split::Test, Split::Unassigned][*split];
                }
                if *tagged {
                    r.demographic_tags = Some([("age".to_string(), format!("{}", i % 3))].into());
                    r.landmark_path = Some(format!("lm/{i}.json").into());
                }
                r.masked = *masked;
                r
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = DatasetManifest::new("prop", records).unwrap();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        prop_assert_eq!(back.records(), m.records());
        prop_assert_eq!(back.class_counts(), m.class_counts());
    }

    #[test]
    fn consensus_ignores_order(mut votes in prop::collection::vec(verdict_strategy(), 0..12), seed in any::<u64>()) {
        let rule = ConsensusRule::default();
        let before = rule.decide(&votes);
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        votes.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(rule.decide(&votes), before);
    }

    #[test]
    fn consensus_is_monotone(votes in prop::collection::vec(verdict_strategy(), 0..12), min in 1usize..6) {
        let rule = ConsensusRule::new(min, 4).unwrap();
        let mut more = votes.clone();
        match rule.decide(&votes) {
            Decision::Keep(l) => {
                more.push(Verdict::Emotion(l));
                prop_assert_eq!(rule.decide(&more), Decision::Keep(l));
            }
            Decision::RejectIrrelevant => {
                more.push(Verdict::Irrelevant);
                prop_assert_eq!(rule.decide(&more), Decision::RejectIrrelevant);
            }
            Decision::RejectNoConsensus => {}
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::array::uniform7(-700.0f64..700.0)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_streams_do_not_affect_predictions(
        a in prop::collection::vec(-2.0f64..2.0, 40),
        b in prop::collection::vec(-2.0f64..2.0, 40),
        seed in any::<u64>(),
    ) {
        let dims = FeatureDims { face_deep: 6, background: 5, place: 4 };
        let params = ClassifierParams::init(dims.total(), 8, seed);
        let x = bundle(dims, &a);
        let mut y = bundle(dims, &b);
        y.visible = x.visible.clone();
        y.au = x.au.clone();
        y.face_deep = x.face_deep.clone();
        prop_assert_eq!(predict(&params, &x, StreamMask::FACE).unwrap(), predict(&params, &y, StreamMask::FACE).unwrap());
        let v = assemble(&x, StreamMask::FACE).unwrap();
        prop_assert!(v[dims.background_range()].iter().chain(&v[dims.place_range()]).all(|z| *z == 0.0));
        y.place = x.place.clone();
        let fp = StreamMask::new(true, false, true).unwrap();
        prop_assert_eq!(predict(&params, &x, fp).unwrap(), predict(&params, &y, fp).unwrap());
    }
}
