//! End-to-end training behavior: determinism, freeze correctness across
//! methods, and the early-stopped base trainer.

use mbl_core::debias::{
    compute_task_vector, apply_task_vector, finetune, finetune_until_resolved,
    gender_resolution_on_samples, run_cda, run_daudos, DosPolarity, SearchConfig,
    search_hyperparams, TaskVectorParams,
};
use mbl_core::eval::{build_probes, evaluate_model};
use mbl_core::forge::{generate_dataset, BiasChannel, GenSpec, Sample};
use mbl_core::models::{freeze_mask, Archetype, FreezeSetting, Model};
use mbl_core::tensor::Tag;

fn dataset(seed: u64) -> Vec<Sample> {
    generate_dataset(&GenSpec {
        n_samples: 96,
        seed,
        bias_channel: BiasChannel::Both,
        bias_strength: 0.6,
        gender_occupation_correlation: 0.85,
        noise_sigma: 0.05,
    })
    .unwrap()
}

#[test]
fn same_seed_same_bits_after_training() {
    let data = dataset(1);
    for archetype in [Archetype::DualEncoder, Archetype::CaptionScorer] {
        let model = Model::init(archetype, 42);
        let a = finetune(&model, &data, FreezeSetting::Both, 3, 0.05, 7).unwrap();
        let b = finetune(&model, &data, FreezeSetting::Both, 3, 0.05, 7).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}

#[test]
fn frozen_tags_survive_every_method() {
    let data = dataset(2);
    let probes = build_probes(3, 2).unwrap();
    for archetype in [Archetype::DualEncoder, Archetype::CaptionScorer] {
        let base = Model::init(archetype, 5);
        for setting in [FreezeSetting::TextOnly, FreezeSetting::VisionOnly] {
            let mask = freeze_mask(setting);
            let frozen_names: Vec<String> = base
                .params()
                .iter()
                .filter(|(_, p)| mask.freezes(p.tag))
                .map(|(n, _)| n.to_string())
                .collect();
            let check = |label: &str, m: &Model| {
                for name in &frozen_names {
                    assert!(
                        m.params()
                            .get(name)
                            .unwrap()
                            .bitwise_eq(base.params().get(name).unwrap()),
                        "{label}: `{name}` moved under {setting:?}"
                    );
                }
            };

            let cda = run_cda(&base, &data, setting, 2, 0.02, 11).unwrap();
            check("cda", &cda);

            let k = data.len().div_ceil(3);
            let dau =
                run_daudos(&base, &data, k, setting, DosPolarity::Ascending, 2, 0.02, 11).unwrap();
            check("daudos", &dau);

            let ft = finetune(&base, &data, setting, 2, 0.02, 11).unwrap();
            let tv = compute_task_vector(base.params(), ft.params()).unwrap();
            let cfg = SearchConfig {
                trials: 4,
                lambda_gap: 1.0,
                seed: 9,
            };
            let outcome = search_hyperparams(&base, &tv, &probes, &cfg, &mask).unwrap();
            let edited = apply_task_vector(base.params(), &tv, &outcome.best, &mask).unwrap();
            let edited = base.with_params(edited).unwrap();
            check("task_vector", &edited);
        }
    }
}

#[test]
fn task_vector_identity_edges_hold_for_any_mask() {
    let base = Model::init(Archetype::DualEncoder, 3);
    let ft = finetune(&base, &dataset(4), FreezeSetting::Both, 1, 0.05, 2).unwrap();
    let tv = compute_task_vector(base.params(), ft.params()).unwrap();
    for mask in [
        freeze_mask(FreezeSetting::Raw),
        freeze_mask(FreezeSetting::TextOnly),
        freeze_mask(FreezeSetting::Both),
    ] {
        for p in [
            TaskVectorParams::new(0.0, 0.4).unwrap(),
            TaskVectorParams::new(0.9, 1.0).unwrap(),
        ] {
            let out = apply_task_vector(base.params(), &tv, &p, &mask).unwrap();
            assert!(out.bitwise_eq(base.params()));
        }
    }
}

#[test]
fn early_stopped_trainer_reaches_its_target() {
    let data = generate_dataset(&GenSpec {
        n_samples: 320,
        seed: 77,
        bias_channel: BiasChannel::Vision,
        bias_strength: 0.15,
        gender_occupation_correlation: 1.0,
        noise_sigma: 0.05,
    })
    .unwrap();
    let model = Model::init(Archetype::DualEncoder, 21);
    let before = gender_resolution_on_samples(&model, &data).unwrap();
    let (trained, epochs) =
        finetune_until_resolved(&model, &data, FreezeSetting::Both, 0.05, 13, 0.9, 60).unwrap();
    let after = gender_resolution_on_samples(&trained, &data).unwrap();
    assert!(epochs >= 1);
    if epochs < 60 {
        assert!(after >= 0.9, "stopped at {after}");
    }
    assert!(after > before);

    // Raw setting trains nothing.
    let (raw, e) =
        finetune_until_resolved(&model, &data, FreezeSetting::Raw, 0.05, 13, 0.9, 60).unwrap();
    assert!(raw.bitwise_eq(&model));
    assert_eq!(e, 0);
}

#[test]
fn evaluation_does_not_mutate_the_model() {
    let data = dataset(6);
    let model = finetune(
        &Model::init(Archetype::DualEncoder, 8),
        &data,
        FreezeSetting::Both,
        2,
        0.05,
        3,
    )
    .unwrap();
    let snapshot = model.clone();
    let probes = build_probes(10, 2).unwrap();
    let a = evaluate_model(&model, &probes).unwrap();
    let b = evaluate_model(&model, &probes).unwrap();
    assert_eq!(a, b);
    assert!(model.bitwise_eq(&snapshot));
}

#[test]
fn decoder_tag_only_trains_under_both() {
    let data = dataset(9);
    let base = Model::init(Archetype::CaptionScorer, 31);
    let coupler = "decoder.vis2txt";
    for (setting, should_move) in [
        (FreezeSetting::TextOnly, false),
        (FreezeSetting::VisionOnly, false),
        (FreezeSetting::Both, true),
    ] {
        let tuned = finetune(&base, &data, setting, 2, 0.05, 17).unwrap();
        let same = tuned
            .params()
            .get(coupler)
            .unwrap()
            .bitwise_eq(base.params().get(coupler).unwrap());
        assert_eq!(!same, should_move, "{setting:?}");
        assert_eq!(base.params().tag_of(coupler), Some(Tag::Decoder));
    }
}

#[test]
fn converged_unbiased_model_resolves_female_probes() {
    use mbl_core::eval::{resolve_probe, ProbeKind};
    use mbl_core::forge::Gender;
    use mbl_core::rng::mix;
    let mut accs = Vec::new();
    for seed in 1..=3u64 {
        let data = generate_dataset(&GenSpec {
            n_samples: 640,
            seed: mix(seed, 0xDA7A),
            bias_channel: BiasChannel::None,
            bias_strength: 0.0,
            gender_occupation_correlation: 0.5,
            noise_sigma: 0.05,
        })
        .unwrap();
        let model = Model::init(Archetype::DualEncoder, mix(seed, 0x1217));
        let (model, _) = finetune_until_resolved(
            &model,
            &data,
            FreezeSetting::Both,
            0.05,
            mix(seed, 0x7247),
            0.98,
            200,
        )
        .unwrap();
        let probes = build_probes(mix(seed, 0xB0BE), 12).unwrap();
        let female: Vec<_> = probes
            .iter()
            .filter(|p| p.true_gender == Gender::Female && p.kind == ProbeKind::OO)
            .collect();
        let correct = female
            .iter()
            .filter(|p| resolve_probe(&model, p).unwrap() == Gender::Female)
            .count();
        accs.push(correct as f64 / female.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean > 0.9, "seed-averaged female accuracy {mean}");
}
