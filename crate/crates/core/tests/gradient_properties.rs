//! Structural properties of the policy-gradient estimators on random
//! instances.

use proptest::prelude::*;

use dagrpo_core::advantage::{compute_masks, partition, Group, MaskSet};
use dagrpo_core::gradcheck::{random_instance, Instance};
use dagrpo_core::gradient::{
    clipped_surrogate, conflict_report, dagrpo_gradient, gradient_components, grpo_gradient, per_rollout_gradients, GradientVector,
    ObjectiveConfig, RatioMode,
};
use dagrpo_core::policy::logprob_sequence;
use dagrpo_core::rng::stream;

fn instance(seed: u64) -> Instance {
    random_instance(&mut stream(seed, &[31])).unwrap()
}

fn unit(inst: &Instance) -> ObjectiveConfig {
    ObjectiveConfig { ratio_mode: RatioMode::UnitApprox, ..inst.objective }
}

fn max_diff(a: &GradientVector, b: &GradientVector) -> f64 {
    let mut d = a.clone();
    d.add_scaled(b, -1.0);
    d.rows().flat_map(|(_, r)| r.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Conflicting-coordinate count and cancelled L1 mass `Σ_c (Σ_i |x_ic| − |Σ_i x_ic|)`
/// of the per-rollout vectors.
fn absolute_conflict(group: &Group, inst: &Instance) -> (usize, f64) {
    let vectors = per_rollout_gradients(group, &inst.params, &unit(inst)).unwrap();
    let mut coords: std::collections::BTreeMap<(String, usize), (bool, bool, f64, f64)> = Default::default();
    for v in &vectors {
        for (ctx, row) in v.rows() {
            for (j, &x) in row.iter().enumerate() {
                let e = coords.entry((ctx.encode(), j)).or_default();
                e.0 |= x > 0.0;
                e.1 |= x < 0.0;
                e.2 += x;
                e.3 += x.abs();
            }
        }
    }
    let conflicts = coords.values().filter(|e| e.0 && e.1).count();
    let lost = coords.values().map(|e| e.3 - e.2.abs()).sum();
    (conflicts, lost)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gradient_is_sum_of_sign_components(seed in any::<u64>()) {
        let inst = instance(seed);
        let obj = unit(&inst);
        let full = grpo_gradient(&inst.group, &inst.params, &obj).unwrap();
        let (pos, neg) = gradient_components(&inst.group, &inst.params, &obj).unwrap();
        let mut sum = pos.clone();
        sum.add_scaled(&neg, 1.0);
        prop_assert!(max_diff(&full, &sum) < 1e-12);
    }

    #[test]
    fn masked_gradient_is_retained_subgroup(seed in any::<u64>()) {
        let inst = instance(seed);
        let obj = unit(&inst);
        let masked = dagrpo_gradient(&inst.group, &inst.masks, &inst.params, &obj).unwrap();
        let kept = inst.group.retained(&inst.masks);
        let mut oracle = GradientVector::new(inst.params.vocab_size());
        if !kept.is_empty() {
            oracle = grpo_gradient(&kept, &inst.params, &obj).unwrap();
            // the 1/|G| factor stays that of the full group
            oracle.scale(kept.len() as f64 / inst.group.len() as f64);
        }
        prop_assert!(max_diff(&masked, &oracle) < 1e-12);
    }

    #[test]
    fn all_one_masks_reproduce_grpo(seed in any::<u64>()) {
        let inst = instance(seed);
        let obj = unit(&inst);
        let part = partition(&inst.group).unwrap();
        let a = dagrpo_gradient(&inst.group, &MaskSet::all_ones(&part), &inst.params, &obj).unwrap();
        let b = grpo_gradient(&inst.group, &inst.params, &obj).unwrap();
        prop_assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn clipping_is_inactive_at_the_behavior_policy(seed in any::<u64>()) {
        let mut inst = instance(seed);
        for r in inst.group.rollouts.iter_mut().filter(|r| !r.is_off_policy()) {
            r.behavior_logprobs = Some(logprob_sequence(&inst.params, &inst.group.prompt, &r.tokens).per_token);
        }
        let obj = ObjectiveConfig { kl_beta: 0.0, ratio_mode: RatioMode::Exact, ..inst.objective };
        let out = clipped_surrogate(&inst.group, Some(&inst.masks), &inst.params, &inst.params_ref, &obj).unwrap();
        let plain = dagrpo_gradient(&inst.group, &inst.masks, &inst.params, &ObjectiveConfig { ratio_mode: RatioMode::UnitApprox, ..obj }).unwrap();
        prop_assert_eq!(out.clipped_fraction, 0.0);
        prop_assert!(max_diff(&out.gradient, &plain) < 1e-12);
    }

    #[test]
    fn masking_never_adds_conflict(seed in any::<u64>()) {
        let inst = instance(seed);
        let (c_full, m_full) = absolute_conflict(&inst.group, &inst);
        let (c_kept, m_kept) = absolute_conflict(&inst.group.retained(&inst.masks), &inst);
        prop_assert!(c_kept <= c_full);
        prop_assert!(m_kept <= m_full + 1e-12);
    }

    #[test]
    fn conflict_indices_are_fractions(seed in any::<u64>()) {
        let inst = instance(seed);
        let r = conflict_report(&inst.group, &inst.params, &unit(&inst)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.interference_index));
        prop_assert!((0.0..=1.0).contains(&r.cancellation_mass));
        for row in &r.pairwise_cosine {
            prop_assert!(row.iter().all(|c| (-1.0 - 1e-12..=1.0 + 1e-12).contains(c)));
        }
        for p in &r.shared_pairs {
            prop_assert!(p.positive_count > 0 && p.negative_count > 0);
        }
    }

    #[test]
    fn larger_margin_masks_more(seed in any::<u64>(), d in 0.0f64..4.0, extra in 0.0f64..4.0) {
        let inst = instance(seed);
        let part = partition(&inst.group).unwrap();
        let small = compute_masks(&inst.group, &part, d).unwrap();
        let large = compute_masks(&inst.group, &part, d + extra).unwrap();
        for i in 0..inst.group.len() {
            prop_assert!(large.weight(i) <= small.weight(i));
        }
        small.check_against(&part).unwrap();
    }
}

/// Fraction indices are not monotone under removal even though the absolute
/// quantities are: dropping a non-conflicting member shrinks the touched set.
#[test]
fn fraction_index_can_rise_when_members_are_removed() {
    let mut found = false;
    for seed in 0..2000 {
        let inst = instance(seed);
        let kept = inst.group.retained(&inst.masks);
        let obj = unit(&inst);
        let full = conflict_report(&inst.group, &inst.params, &obj).unwrap();
        let part = conflict_report(&kept, &inst.params, &obj).unwrap();
        if part.interference_index > full.interference_index + 1e-12 {
            found = true;
            break;
        }
    }
    assert!(found);
}
