mod common;

use std::sync::Arc;

use proptest::prelude::*;
use sparse_tune::analysis::overlap_matrix;
use sparse_tune::engine::{
    l1_anchor, linear_decay, lt_sft, phase1_full_finetune, phase2_masked_finetune, select_mask,
    Budget, CheckpointSelection, MaskStrategy, OptimizerConfig, OptimizerKind, TrainConfig,
    TrainContext,
};
use sparse_tune::model::{mlm_corrupt, Batch, ForwardOptions, Labels, ModelSpec, TransformerModel};
use sparse_tune::numeric::grad_check_flat;
use sparse_tune::param::{
    apply_diffs, deserialize_diff, extract_diff, extract_diff_over, serialize_diff, GroupPolicy,
    GroupTag, Layout, Mask, Metadata, ParameterGroups, ParameterSnapshot, SparseDiff,
};
use sparse_tune::synth::{generate_sentences, generate_task_data, is_grammatical, TaskKind};
use sparse_tune::transfer::{
    multi_source_schedule, train_language_sft, train_task_sft, zero_shot_apply,
};

use common::{ops::op_cases, small_suite, tiny_model, Quadratic};

fn layout_strategy() -> impl Strategy<Value = Arc<Layout>> {
    prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..5).prop_map(|shapes| {
        Layout::new(
            shapes
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("t{i}"), s))
                .collect(),
        )
        .unwrap()
    })
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, n)
}

/// Deltas as a trainer produces them: mostly zero, spread over many scales.
fn sparse_deltas(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(
        prop_oneof![
            2 => Just(0.0f32),
            3 => (-1.0f32..1.0, -12i32..2).prop_map(|(m, e)| m * 10f32.powi(e)),
        ],
        n,
    )
}

/// Any finite value from tiny to huge, for stressing composition order.
fn wide_deltas(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(
        prop_oneof![
            1 => Just(0.0f32),
            3 => (-1.0f32..1.0, -30i32..30).prop_map(|(m, e)| m * 10f32.powi(e)),
        ],
        n,
    )
}

fn snapshot_with(layout: &Arc<Layout>, v: Vec<f32>) -> ParameterSnapshot {
    ParameterSnapshot::from_flat(layout.clone(), v).unwrap()
}

fn diff_with(layout: &Arc<Layout>, dense: &[f32]) -> SparseDiff {
    SparseDiff::from_dense(layout.clone(), dense).unwrap()
}

/// A layout with a base and `k` dense delta vectors.
fn layout_base_deltas(
    k: usize,
    deltas: fn(usize) -> BoxedStrategy<Vec<f32>>,
) -> impl Strategy<Value = (Arc<Layout>, Vec<f32>, Vec<Vec<f32>>)> {
    layout_strategy().prop_flat_map(move |layout| {
        let n = layout.total();
        (Just(layout), values(n), prop::collection::vec(deltas(n), k))
    })
}

fn boxed_sparse(n: usize) -> BoxedStrategy<Vec<f32>> {
    sparse_deltas(n).boxed()
}

fn boxed_wide(n: usize) -> BoxedStrategy<Vec<f32>> {
    wide_deltas(n).boxed()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn extraction_reconstructs_trained_values((layout, base, deltas) in layout_base_deltas(1, boxed_sparse)) {
        let x = snapshot_with(&layout, base.clone());
        let y = snapshot_with(
            &layout,
            base.iter().zip(&deltas[0]).map(|(&b, &d)| (b as f64 + d as f64) as f32).collect(),
        );
        let phi = extract_diff(&y, &x).unwrap();
        prop_assert!(apply_diffs(&x, &[&phi]).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn extraction_over_overlays_reconstructs((layout, base, deltas) in layout_base_deltas(3, boxed_sparse)) {
        let x = snapshot_with(&layout, base);
        let o1 = diff_with(&layout, &deltas[0]);
        let o2 = diff_with(&layout, &deltas[1]);
        let phi = diff_with(&layout, &deltas[2]);
        let y = apply_diffs(&x, &[&o1, &o2, &phi]).unwrap();
        let back = extract_diff_over(&y, &x, &[&o2, &o1]).unwrap();
        prop_assert!(apply_diffs(&x, &[&back, &o1, &o2]).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn composition_ignores_diff_order(
        (layout, base, deltas) in layout_base_deltas(4, boxed_wide),
        order in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let x = snapshot_with(&layout, base);
        let diffs: Vec<SparseDiff> = deltas.iter().map(|d| diff_with(&layout, d)).collect();
        let forward: Vec<&SparseDiff> = diffs.iter().collect();
        let shuffled: Vec<&SparseDiff> = order.iter().map(|&i| &diffs[i]).collect();
        prop_assert!(apply_diffs(&x, &forward).unwrap().bitwise_eq(&apply_diffs(&x, &shuffled).unwrap()));
    }

    #[test]
    fn density_is_a_fraction_and_zero_only_for_equal_inputs(
        (layout, base, deltas) in layout_base_deltas(1, boxed_sparse),
    ) {
        let x = snapshot_with(&layout, base.clone());
        let y = snapshot_with(
            &layout,
            base.iter().zip(&deltas[0]).map(|(&b, &d)| (b as f64 + d as f64) as f32).collect(),
        );
        let density = extract_diff(&y, &x).unwrap().density();
        prop_assert!((0.0..=1.0).contains(&density));
        let equal = x.values().iter().zip(y.values()).all(|(a, b)| a == b);
        prop_assert_eq!(density == 0.0, equal);
    }

    #[test]
    fn container_round_trip_is_bit_exact(
        (layout, _, deltas) in layout_base_deltas(1, boxed_wide),
        metadata in prop::collection::btree_map("[a-z_]{1,8}", "\\PC{0,12}", 0..4),
    ) {
        let diff = diff_with(&layout, &deltas[0]);
        let metadata: Metadata = metadata;
        let back = deserialize_diff(&serialize_diff(&diff, &metadata)).unwrap();
        prop_assert!(back.diff.bitwise_eq(&diff));
        prop_assert_eq!(back.metadata, metadata);
    }

    #[test]
    fn overlap_matrix_is_symmetric_bounded_with_full_diagonal(
        total in 8usize..64,
        k_frac in 0.05f64..1.0,
        seeds in prop::collection::vec(any::<u64>(), 1..5),
    ) {
        let layout = Layout::new(vec![("w".into(), vec![total])]).unwrap();
        let k = ((k_frac * total as f64) as usize).max(1);
        let masks: Vec<Mask> = seeds
            .iter()
            .map(|&s| {
                let mut idx: Vec<usize> = (0..total).collect();
                let rng = sparse_tune::numeric::CounterRng::new(s);
                idx.sort_by_key(|&i| rng.u64(i as u64));
                Mask::from_indices(layout.clone(), idx.into_iter().take(k)).unwrap()
            })
            .collect();
        let tags: Vec<String> = (0..masks.len()).map(|i| format!("l{i}")).collect();
        let named: Vec<(&str, &Mask)> = tags.iter().map(String::as_str).zip(masks.iter()).collect();
        let m = overlap_matrix(&named).unwrap();
        for a in 0..masks.len() {
            prop_assert_eq!(m.get(a, a), 100.0);
            for b in 0..masks.len() {
                prop_assert!((0.0..=100.0).contains(&m.get(a, b)));
                prop_assert_eq!(m.get(a, b), m.get(b, a));
            }
        }
    }
}

/// A layout whose tensors carry random group tags, with values for θ0 and θ1.
fn tagged_problem() -> impl Strategy<Value = (Arc<Layout>, Vec<GroupTag>, Vec<f32>, Vec<f32>)> {
    let tag = prop::sample::select(GroupTag::ALL[..6].to_vec());
    (layout_strategy(), prop::collection::vec(tag, 4)).prop_flat_map(|(layout, tags)| {
        let n = layout.total();
        let tags: Vec<GroupTag> = (0..layout.len()).map(|i| tags[i % tags.len()]).collect();
        // few distinct magnitudes so ties are common
        let v = prop::collection::vec((-3i8..4).prop_map(|q| q as f32 * 0.25), n);
        (Just(layout), Just(tags), v.clone(), v)
    })
}

fn policy_strategy() -> impl Strategy<Value = GroupPolicy> {
    prop::collection::btree_set(prop::sample::select(GroupTag::ALL[..6].to_vec()), 0..3)
        .prop_map(|excluded| GroupPolicy { excluded })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masks_honour_budget_and_exclusions(
        (layout, tags, t0, t1) in tagged_problem(),
        policy in policy_strategy(),
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let groups = ParameterGroups::new(layout.clone(), tags).unwrap();
        let maskable = policy.maskable(&groups);
        prop_assume!(maskable.count() > 0);
        let k = 1 + (k_frac * (maskable.count() - 1) as f64) as usize;
        let theta0 = snapshot_with(&layout, t0);
        let theta1 = snapshot_with(&layout, t1);
        for strategy in [MaskStrategy::LotteryTicket, MaskStrategy::RandomK] {
            let mask = select_mask(&theta0, &theta1, &groups, &policy, strategy, k, seed).unwrap();
            prop_assert_eq!(mask.count(), k);
            prop_assert!(mask.is_subset(&maskable));
        }
        let bias = select_mask(&theta0, &theta1, &groups, &policy, MaskStrategy::BiasOnly, 0, seed).unwrap();
        prop_assert_eq!(bias, groups.mask_of(&[GroupTag::Bias]).and(&maskable));
    }

    #[test]
    fn learning_rate_decays_linearly_to_zero(eta0 in 1e-6f64..1.0, total in 1usize..500, t in 0usize..600) {
        let lr = linear_decay(eta0, t, total);
        if t >= total {
            prop_assert_eq!(lr, 0.0);
        } else {
            prop_assert!((lr - eta0 * (1.0 - t as f64 / total as f64)).abs() <= 1e-15 * eta0);
            prop_assert!(linear_decay(eta0, t + 1, total) <= lr);
        }
    }

    #[test]
    fn l1_anchor_gradient_matches_finite_differences(
        pairs in prop::collection::vec((-2.0f64..2.0, prop_oneof![-2.0f64..-0.05, 0.05f64..2.0]), 1..20),
        lambda in 0.0f64..5.0,
    ) {
        let step = 1e-3;
        let theta0: Vec<f32> = pairs.iter().map(|p| p.0 as f32).collect();
        let theta: Vec<f32> = pairs.iter().map(|p| (p.0 + p.1) as f32).collect();
        // only coordinates away from the kink
        let coords: Vec<usize> = (0..theta.len())
            .filter(|&i| (theta[i] as f64 - theta0[i] as f64).abs() > 10.0 * step)
            .collect();
        let n = theta.len();
        let eval = |v: &[f32]| Ok(l1_anchor(v, &theta0, lambda, n));
        let r = grad_check_flat(eval, &theta, step, Some(&coords)).unwrap();
        prop_assert!(r.max_rel_error < 1e-3, "{:?}", r);
    }
}

fn sgd(lr: f64, steps: usize, policy: GroupPolicy) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        phase1_steps: steps,
        phase2_steps: steps,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::default()
        },
        dropout: 0.0,
        policy,
        checkpoint: CheckpointSelection::Final,
        ..TrainConfig::default()
    }
}

fn quadratic_problem() -> impl Strategy<Value = (Quadratic, Vec<f32>)> {
    tagged_problem().prop_flat_map(|(layout, tags, t0, _)| {
        let n = layout.total();
        (
            Just((layout, tags, t0)),
            prop::collection::vec(0.1f64..2.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-0.5f64..0.5, n),
        )
            .prop_map(|((layout, tags, t0), a, c, g)| (Quadratic::new(layout, tags, a, c, g), t0))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_training_leaves_other_coordinates_untouched(
        (q, t0) in quadratic_problem(),
        policy in policy_strategy(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..8),
        adam in any::<bool>(),
        lambda in prop_oneof![Just(0.0), 0.01f64..1.0],
    ) {
        let maskable: Vec<usize> = policy.maskable(&q.groups).ones().collect();
        prop_assume!(!maskable.is_empty());
        let mask = Mask::from_indices(q.layout.clone(), picks.iter().map(|p| *p.get(&maskable))).unwrap();
        let base = snapshot_with(&q.layout, t0);
        let mut cfg = sgd(0.05, 12, policy);
        cfg.lambda = lambda;
        if adam {
            cfg.optimizer.kind = OptimizerKind::Adamw;
            cfg.optimizer.weight_decay = 0.01;
        }
        let out = phase2_masked_finetune(&q, &TrainContext::plain(&base, 0), &mask, &cfg).unwrap();
        for i in 0..base.total() {
            if !mask.get(i) {
                prop_assert_eq!(out.params.values()[i].to_bits(), base.values()[i].to_bits());
            }
        }
        prop_assert!(out.diff.support().is_subset(&mask));
        prop_assert!(apply_diffs(&base, &[&out.diff]).unwrap().bitwise_eq(&out.params));
    }

    #[test]
    fn identical_inputs_give_identical_diffs(
        (q, t0) in quadratic_problem(),
        strategy in prop::sample::select(vec![MaskStrategy::LotteryTicket, MaskStrategy::RandomK]),
        seed in any::<u64>(),
    ) {
        let base = snapshot_with(&q.layout, t0);
        let mut cfg = sgd(0.05, 8, GroupPolicy::none());
        cfg.optimizer.kind = OptimizerKind::Adamw;
        cfg.budget = Budget::Count(1);
        cfg.seed = seed;
        let a = lt_sft(&q, &TrainContext::plain(&base, seed), &cfg, strategy).unwrap();
        let b = lt_sft(&q, &TrainContext::plain(&base, seed), &cfg, strategy).unwrap();
        prop_assert!(a.diff.bitwise_eq(&b.diff));
        prop_assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn both_phases_follow_the_linear_schedule() {
    // linear loss: plain SGD moves each coordinate by -g · Σ_t η0 (1 − t/T)
    let layout = Layout::new(vec![("w".into(), vec![3])]).unwrap();
    let g = vec![0.5, -1.0, 2.0];
    let q = Quadratic::new(
        layout.clone(),
        vec![GroupTag::Ffn],
        vec![0.0; 3],
        vec![0.0; 3],
        g.clone(),
    );
    let base = snapshot_with(&layout, vec![0.0; 3]);
    let (eta0, steps) = (0.01, 40);
    let cfg = sgd(eta0, steps, GroupPolicy::none());
    let total_lr: f64 = (0..steps)
        .map(|t| eta0 * (1.0 - t as f64 / steps as f64))
        .sum();
    let ctx = TrainContext::plain(&base, 0);
    let p1 = phase1_full_finetune(&q, &ctx, &cfg).unwrap();
    let p2 = phase2_masked_finetune(&q, &ctx, &Mask::full(layout.clone()), &cfg).unwrap();
    for out in [p1, p2] {
        for (v, gi) in out.params.values().iter().zip(&g) {
            assert!(
                (*v as f64 + gi * total_lr).abs() < 1e-5,
                "{} vs {}",
                v,
                -gi * total_lr
            );
        }
    }
}

#[test]
fn every_op_passes_gradient_checks_on_random_shapes() {
    for seed in 0..64 {
        for case in op_cases::<f64>(seed) {
            let err = case.max_rel_error(1e-5);
            assert!(err < 1e-6, "f64 {} seed {}: {}", case.name, seed, err);
        }
        for case in op_cases::<f32>(seed) {
            let err = case.max_rel_error(1e-3);
            assert!(err < 1e-3, "f32 {} seed {}: {}", case.name, seed, err);
        }
    }
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        1usize..40,
        1usize..4,
        1usize..3,
        1usize..12,
        1usize..16,
        any::<bool>(),
    )
        .prop_map(|(vocab, heads, layers, per_head, ffn, tie)| ModelSpec {
            vocab_size: vocab + 3,
            hidden_size: heads * per_head,
            layers,
            heads,
            ffn_size: ffn,
            max_seq_len: 8,
            tie_output_embedding: tie,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameter_groups_partition_the_model(spec in spec_strategy()) {
        let model = TransformerModel::new(spec.clone()).unwrap();
        let counts = model.groups().counts();
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), model.layout().total());
        let names = model.layout().names();
        prop_assert!(names.iter().any(|n| n == "embeddings.token"));
        prop_assert_eq!(names.iter().any(|n| n == "mlm.decoder.weight"), !spec.tie_output_embedding);
    }
}

#[test]
fn untied_embeddings_are_separate_parameters() {
    let model = tiny_model();
    let groups = model.groups();
    let layout = model.layout();
    let input = layout.index_of("embeddings.token").unwrap();
    let output = layout.index_of("mlm.decoder.weight").unwrap();
    assert_ne!(input, output);
    assert_eq!(groups.tag(input), GroupTag::InputEmbedding);
    assert_eq!(groups.tag(output), GroupTag::OutputEmbedding);
    assert_eq!(layout.shape(input), layout.shape(output));
}

#[test]
fn forward_pass_is_deterministic_with_dropout() {
    let model = tiny_model();
    let params = model.init(5);
    let langs = small_suite(64);
    let sentences = generate_sentences(&langs[0], 6).unwrap();
    let batch = Batch::from_sequences(
        sentences.into_iter().map(|s| s.tokens).collect(),
        Labels::None,
        None,
    );
    let mlm = mlm_corrupt(&batch, 0.3, 9, 64).unwrap();
    let opts = ForwardOptions {
        dropout: 0.2,
        seed: 4,
        step: 7,
    };
    let a = model
        .forward_loss(&params, None, &mlm.batch, &opts)
        .unwrap();
    let b = model
        .forward_loss(&params, None, &mlm.batch, &opts)
        .unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(a
        .body
        .iter()
        .zip(&b.body)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let other = ForwardOptions { step: 8, ..opts };
    let c = model
        .forward_loss(&params, None, &mlm.batch, &other)
        .unwrap();
    assert_ne!(a.loss, c.loss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_pure_and_grammatical(lang in 0usize..2, count in 1usize..40, salt in any::<u64>()) {
        let spec = small_suite(64)[lang].reseeded(salt);
        prop_assert!(generate_sentences(&spec, 0).is_err());
        let a = generate_sentences(&spec, count).unwrap();
        let b = generate_sentences(&spec, count).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a {
            prop_assert!(is_grammatical(&spec, &s.tokens));
            prop_assert!(s.tokens.iter().all(|&t| t < spec.vocab_limit));
        }
    }

    #[test]
    fn multi_source_stream_is_a_seeded_permutation(seed in any::<u64>(), cap in 1usize..30, batch in 1usize..6) {
        let langs = small_suite(64);
        let data: Vec<_> = langs
            .iter()
            .map(|l| generate_task_data(l, TaskKind::CategoryTagging, 20).unwrap())
            .collect();
        let refs: Vec<_> = data.iter().collect();
        let a = multi_source_schedule(&refs, cap, batch, seed).unwrap();
        let b = multi_source_schedule(&refs, cap, batch, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut per_lang = vec![0usize; refs.len()];
        for (bt, l) in &a {
            per_lang[*l] += bt.len();
            prop_assert_eq!(bt.language.as_deref(), Some(refs[*l].language.as_str()));
        }
        for (n, d) in per_lang.iter().zip(&refs) {
            prop_assert_eq!(*n, cap.min(d.examples.len()));
        }
    }
}

#[test]
fn task_diff_is_recovered_by_removing_the_source_language() {
    let model = tiny_model();
    let langs = small_suite(64);
    let base = model.init(1);
    let corpus = sparse_tune::synth::generate_corpus(&langs[0], 40).unwrap();
    let cfg = TrainConfig {
        phase1_steps: 6,
        phase2_steps: 6,
        batch_size: 8,
        learning_rate: 1e-2,
        budget: Budget::Fraction(0.2),
        ..sparse_tune::transfer::language_config()
    };
    let lang = train_language_sft(
        &model,
        &base,
        &corpus,
        None,
        &cfg,
        MaskStrategy::LotteryTicket,
    )
    .unwrap();
    let data = generate_task_data(&langs[0], TaskKind::CategoryTagging, 40).unwrap();
    let tcfg = TrainConfig { lambda: 0.0, ..cfg };
    let task = train_task_sft(
        &model,
        &base,
        &data,
        None,
        Some(&lang),
        &tcfg,
        MaskStrategy::LotteryTicket,
    )
    .unwrap();
    let stored = zero_shot_apply(&base, &task, Some(&lang)).unwrap();
    let removed = extract_diff_over(&stored, &base, &[&lang.diff]).unwrap();
    assert!(removed.bitwise_eq(&task.diff));
    assert!(!task.diff.is_empty());
}
