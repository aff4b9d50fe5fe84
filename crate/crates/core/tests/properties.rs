use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3e_autograd::{init, Graph, ParamStore, Session};

use s3e_core::blursynth::{apply_motion_blur, sample_motion_flow, SeverityRange};
use s3e_core::capparse::{
    build_vocabs, extract_slots, is_entity_node, prune_to_tree, CaptionTreeLabels, Pos, TaggedToken, Vocab, VocabKind,
    NULL_WORD,
};
use s3e_core::checkpoint::{Checkpoint, NamedTensor};
use s3e_core::config::TrainConfig;
use s3e_core::deblur::{generator_forward, Generator, GeneratorConfig};
use s3e_core::metrics::{bleu, psnr, ssim, SsimOptions};
use s3e_core::nn::FusionForm;
use s3e_core::s3tree::{tree_forward, tree_loss, TreeConfig, TreeParams};
use s3e_core::trainer::lr_schedule;
use s3e_core::ImageTensor;

const WORDS: [&str; 16] = [
    "a", "the", "dog", "cat", "ball", "man", "table", "sits", "holding", "on", "near", "under", "and", "red", "with",
    "zzz",
];

fn pos() -> impl Strategy<Value = Pos> {
    prop_oneof![
        Just(Pos::Noun),
        Just(Pos::Verb),
        Just(Pos::Prep),
        Just(Pos::Conj),
        Just(Pos::Other)
    ]
}

fn tokens() -> impl Strategy<Value = Vec<TaggedToken>> {
    prop::collection::vec((0..WORDS.len(), pos()), 0..14).prop_map(|v| {
        v.into_iter()
            .map(|(i, pos)| TaggedToken {
                surface: WORDS[i].to_string(),
                lemma: WORDS[i].to_string(),
                pos,
            })
            .collect()
    })
}

fn caption() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..10)
        .prop_map(|v| v.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn vocab_of(kind: VocabKind, words: &[usize]) -> Vocab {
    Vocab::new(kind, words.iter().map(|&i| WORDS[i].to_string()))
}

fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
    ImageTensor::from_array(
        init::uniform(&[h, w, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
            .into_dimensionality()
            .unwrap(),
    )
}

proptest! {
    #[test]
    fn pruning_is_total_and_in_range(
        toks in tokens(),
        ents in prop::collection::btree_set(0..WORDS.len(), 0..8),
        rels in prop::collection::btree_set(0..WORDS.len(), 0..8),
    ) {
        let e = vocab_of(VocabKind::Entity, &ents.iter().copied().collect::<Vec<_>>());
        let r = vocab_of(VocabKind::Relation, &rels.iter().copied().collect::<Vec<_>>());
        let labels = prune_to_tree(&toks, &e, &r);
        prop_assert_eq!(&labels, &prune_to_tree(&toks, &e, &r));
        prop_assert!(labels.validate(e.len(), r.len()).is_ok());
        let slots = extract_slots(&toks);
        for j in 1..=7 {
            let vocab = if is_entity_node(j) { &e } else { &r };
            let word = vocab.word(labels.node(j)).unwrap();
            match &slots[j - 1] {
                Some(s) if vocab.id(s).is_some() => prop_assert_eq!(word, s.as_str()),
                _ => prop_assert_eq!(word, NULL_WORD),
            }
        }
    }

    #[test]
    fn vocabularies_are_bijective_and_shrink_with_min_freq(
        caps in prop::collection::vec(caption(), 1..12),
        lo in 1usize..4,
        extra in 0usize..3,
    ) {
        let (e, r) = build_vocabs(&caps, lo).unwrap();
        for v in [&e, &r] {
            prop_assert_eq!(v.word(v.null_id()), Some(NULL_WORD));
            prop_assert_eq!(v.words().iter().filter(|w| *w == NULL_WORD).count(), 1);
            for (i, w) in v.words().iter().enumerate() {
                prop_assert_eq!(v.id(w), Some(i));
            }
        }
        let (e2, r2) = build_vocabs(&caps, lo + extra).unwrap();
        prop_assert!(e2.len() <= e.len());
        prop_assert!(r2.len() <= r.len());
        prop_assert!(e2.words().iter().all(|w| e.id(w).is_some()));
    }

    #[test]
    fn ssim_stays_in_range(a in 0u64..1_000_000, b in 0u64..1_000_000, per_channel: bool) {
        let opts = SsimOptions { per_channel, ..SsimOptions::default() };
        let v = ssim(&image(12, 13, a), &image(12, 13, b), &opts).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v), "{}", v);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1_000_000, base in 0.02f64..0.1) {
        let clean = ImageTensor::filled(6, 6, 3, 0.5);
        let noise = image(6, 6, seed);
        let noisy = |amp: f64| ImageTensor::from_fn(6, 6, 3, |(y, x, c)| 0.5 + amp * (noise.get(y, x, c) - 0.5));
        let scores: Vec<f64> = [base, 2.0 * base, 4.0 * base].iter().map(|&a| psnr(&clean, &noisy(a), 1.0).unwrap()).collect();
        prop_assert!(scores[0] > scores[1] && scores[1] > scores[2], "{:?}", scores);
    }

    #[test]
    fn bleu_is_bounded_and_prefixes_degrade(
        cand in prop::collection::vec(0..WORDS.len(), 1..10),
        reference in prop::collection::vec(0..WORDS.len(), 1..10),
        cut in 1usize..10,
    ) {
        let words = |v: &[usize]| v.iter().map(|&i| WORDS[i]).collect::<Vec<_>>();
        let refs = vec![words(&reference)];
        for n in 1..=4 {
            let b = bleu(&words(&cand), &refs, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b), "{}", b);
        }
        let prefix = words(&reference[..cut.min(reference.len())]);
        let b1 = bleu(&prefix, &refs, 1).unwrap();
        for n in 2..=4 {
            prop_assert!(bleu(&prefix, &refs, n).unwrap() <= b1 + 1e-12);
        }
    }

    #[test]
    fn learning_rate_moves_by_at_most_one_decay_step(flat in 0usize..20, decay in 1usize..20, lr in 1e-5f64..1e-1) {
        let cfg = TrainConfig { epochs_flat: flat, epochs_decay: decay, lr, ..TrainConfig::default() };
        for e in 0..flat + decay + 2 {
            let d = (lr_schedule(e, &cfg) - lr_schedule(e + 1, &cfg)).abs();
            prop_assert!(d <= lr / decay as f64 + 1e-15, "epoch {}: {}", e, d);
        }
    }

    #[test]
    fn checkpoints_round_trip_bytewise(
        tensors in prop::collection::vec((prop::collection::vec(1usize..4, 0..4), any::<bool>(), any::<u64>()), 0..5),
        note in ".{0,20}",
    ) {
        let named: Vec<NamedTensor> = tensors
            .iter()
            .enumerate()
            .map(|(i, (shape, frozen, seed))| NamedTensor {
                name: format!("t{i}"),
                value: init::normal(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(*seed)),
                frozen: *frozen,
            })
            .collect();
        let mut ck = Checkpoint::new();
        ck.put_tensors("weights", &named);
        ck.put_json("note", &note).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.get_tensors("weights").unwrap(), named);
        prop_assert_eq!(back.get_json::<String>("note").unwrap(), note);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn node_probabilities_are_distributions_and_loss_is_nonnegative(seed in any::<u64>(), labels in prop::array::uniform7(0usize..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = TreeConfig { in_channels: 3, node_channels: 2, entity_vocab: 3, relation_vocab: 3, form: FusionForm::Rectified };
        let params = TreeParams::new(&mut store, "tree.", config, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(init::normal(&[1, 3, 4, 4], 1.0, &mut rng));
        let bundle = tree_forward(&s, v, &params).unwrap();
        for j in 1..=7 {
            let p = bundle.probs(j).value();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        }
        let loss = tree_loss(&bundle, &[CaptionTreeLabels(labels)]).unwrap().value().sum();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_output_stays_in_unit_range(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = GeneratorConfig { base_channels: 2, residual_blocks: 1, coupling_channels: 2, tree_channels: 3, dropout: 0.0, form: FusionForm::Rectified };
        let gen = Generator::new(&mut store, "g.", config, &mut rng);
        let id = gen.output.weight;
        *store.get_mut(id) = init::normal(store.get(id).shape(), scale, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let blurry = s.constant(init::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let coupled = s.constant(init::normal(&[1, 3, 2, 2], 1.0, &mut rng));
        let out = generator_forward(&s, &gen, blurry, coupled).unwrap().value();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_is_seeded_and_conserves_interior_mean(seed in any::<u64>(), lo in 0.0f64..0.5) {
        let n = 64;
        let sharp = ImageTensor::from_fn(n, n, 1, |(y, x, _)| {
            let t = std::f64::consts::TAU / n as f64;
            0.5 + 0.2 * (t * x as f64).sin() * (t * y as f64).cos()
        });
        let range = SeverityRange::new(lo, lo + 0.5).unwrap();
        let flow = sample_motion_flow(n, n, range, seed, 3.0);
        prop_assert!(flow.max_displacement() <= 3.0 + 1e-12);
        let a = apply_motion_blur(&sharp, &flow, 17).unwrap();
        prop_assert_eq!(&a, &apply_motion_blur(&sharp, &sample_motion_flow(n, n, range, seed, 3.0), 17).unwrap());
        let interior = |im: &ImageTensor| {
            let m = 4;
            let mut sum = 0.0;
            for y in m..n - m {
                for x in m..n - m {
                    sum += im.get(y, x, 0);
                }
            }
            sum / ((n - 2 * m) * (n - 2 * m)) as f64
        };
        prop_assert!((interior(&a) - interior(&sharp)).abs() < 1e-3);
    }
}
