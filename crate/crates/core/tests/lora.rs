mod common;

use std::collections::BTreeMap;

use common::{active_expert, sample_seqs, tiny_lm};
use latefuse::data::{text_qa_sample, tts_sample, PromptedSample};
use latefuse::lm::{AdaptedLm, LanguageModel, TokenModel};
use latefuse::lora::{apply_policy, inject_lora, merge_lora, TrainablePolicy};
use latefuse::numerics::{AdamWConfig, ParamHost};
use latefuse::rng::stream;
use latefuse::train::{train_model, Source, TrainSpec};
use latefuse::vocab::UnifiedVocab;
use latefuse::Error;

fn refs(seqs: &[Vec<u32>]) -> Vec<&[u32]> {
    seqs.iter().map(|s| s.as_slice()).collect()
}

fn all_checksums(model: &AdaptedLm) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = model
        .base
        .params
        .checksums()
        .into_iter()
        .map(|(k, v)| (format!("lm/{k}"), v))
        .collect();
    out.extend(
        model
            .expert
            .params
            .checksums()
            .into_iter()
            .map(|(k, v)| (format!("{}/{k}", model.expert.prefix()), v)),
    );
    out
}

fn tiny_data() -> Vec<PromptedSample> {
    let v = UnifiedVocab::default();
    let mut out = vec![text_qa_sample("1+2=?", "3").unwrap(), text_qa_sample("4+9=?", "3").unwrap()];
    out.push(tts_sample("01", &[v.semantic_id(1), v.semantic_id(2), v.semantic_id(3)]).unwrap());
    out
}

fn train(model: &mut AdaptedLm, policy: &TrainablePolicy, steps: usize) {
    let view = apply_policy(model, policy).unwrap();
    let data = tiny_data();
    let spec = TrainSpec {
        opt: AdamWConfig::default().with_lr(1e-2).with_steps(steps),
        steps,
        batch_size: 2,
        trainable: view.trainable,
    };
    let sources = [Source {
        samples: &data,
        weight: 1.0,
    }];
    train_model(model, &sources, &spec, &mut stream(5, "train"), &mut |_, _| Ok(())).unwrap();
}

#[test]
fn fresh_adapter_is_bit_neutral() {
    let lm: LanguageModel = tiny_lm(1);
    let expert = inject_lora(&lm, "e", 4, 8.0, &mut stream(2, "inject")).unwrap();
    let seqs = sample_seqs();
    let base = lm.batch_logits(&refs(&seqs)).unwrap();
    let adapted = AdaptedLm { base: lm, expert }.batch_logits(&refs(&seqs)).unwrap();
    assert_eq!(base.data(), adapted.data());
}

#[test]
fn merged_weights_match_adapter_forward() {
    let lm: LanguageModel = tiny_lm(3);
    let expert = active_expert(&lm, "e", 4);
    let seqs = sample_seqs();
    let merged = merge_lora(&lm, &expert).unwrap();
    let want = AdaptedLm { base: lm, expert }.batch_logits(&refs(&seqs)).unwrap();
    let got = merged.batch_logits(&refs(&seqs)).unwrap();
    let scale = want.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
    }
}

#[test]
fn merging_the_same_expert_twice_is_refused() {
    let lm: LanguageModel = tiny_lm(5);
    let expert = active_expert(&lm, "e", 6);
    let merged = merge_lora(&lm, &expert).unwrap();
    assert!(matches!(merge_lora(&merged, &expert), Err(Error::Contract(_))));
}

#[test]
fn rank_limits_are_contract_errors() {
    let lm: LanguageModel = tiny_lm(7);
    assert!(matches!(inject_lora(&lm, "e", 0, 1.0, &mut stream(0, "x")), Err(Error::Contract(_))));
    let too_big = lm.cfg.d_model + 1;
    let err = inject_lora(&lm, "e", too_big, 1.0, &mut stream(0, "x")).unwrap_err();
    assert!(err.to_string().contains("rank"), "{err}");
    assert!(matches!(inject_lora(&lm, "e", 2, 0.0, &mut stream(0, "x")), Err(Error::Contract(_))));
}

#[test]
fn stage1_policy_updates_only_embeddings_head_and_adapters() {
    let lm: LanguageModel = tiny_lm(8);
    let expert = inject_lora(&lm, "tts", 2, 4.0, &mut stream(9, "inject")).unwrap();
    let mut model = AdaptedLm { base: lm, expert };
    let policy = TrainablePolicy::stage1(&model.expert);
    let before = all_checksums(&model);
    train(&mut model, &policy, 5);
    let after = all_checksums(&model);
    for (name, sum) in &before {
        if policy.contains(name) {
            assert_ne!(after[name], *sum, "{name} should have trained");
        } else {
            assert_eq!(after[name], *sum, "{name} changed outside the stage-1 policy");
        }
    }
}

#[test]
fn stage2_policy_freezes_the_whole_base() {
    let lm: LanguageModel = tiny_lm(10);
    let expert = active_expert(&lm, "text_qa", 11);
    let mut model = AdaptedLm { base: lm, expert };
    let policy = TrainablePolicy::stage2(&model.expert);
    let before = all_checksums(&model);
    train(&mut model, &policy, 5);
    let after = all_checksums(&model);
    for (name, sum) in &before {
        if name.starts_with("lm/") {
            assert_eq!(after[name], *sum, "{name} changed in stage 2");
        }
    }
    assert!(before.iter().any(|(n, s)| policy.contains(n) && after[n] != *s));
}

#[test]
fn unknown_policy_names_are_config_errors() {
    let lm: LanguageModel = tiny_lm(12);
    let expert = inject_lora(&lm, "e", 2, 4.0, &mut stream(13, "inject")).unwrap();
    let model = AdaptedLm { base: lm, expert };
    assert!(model.has_param("lm/head"));
    let policy = TrainablePolicy::new(1, ["lm/nope".to_string()]);
    assert!(matches!(apply_policy(&model, &policy), Err(Error::Config(_))));
}
