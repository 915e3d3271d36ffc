use elastic_moe::baselines::{adamoe_select, mean_active_experts, top_p_select, AdaMoeConfig, TopPConfig};
use elastic_moe::moe::{top_k_select, RoutingRecord};
use proptest::prelude::*;

fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn top_p_worked_examples() {
    let probs = [0.1, 0.4, 0.2, 0.3];
    assert_eq!(top_p_select(&probs, 0.35).unwrap(), vec![1]);
    assert_eq!(top_p_select(&probs, 0.4).unwrap(), vec![1]);
    assert_eq!(top_p_select(&probs, 0.5).unwrap(), vec![1, 3]);
    assert_eq!(top_p_select(&probs, 0.9).unwrap(), vec![1, 2, 3]);
    assert_eq!(top_p_select(&probs, 1.0).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn top_p_ties_prefer_lower_index_and_skip_zero_mass() {
    assert_eq!(top_p_select(&[0.25; 4], 0.5).unwrap(), vec![0, 1]);
    assert_eq!(top_p_select(&[0.5, 0.0, 0.5, 0.0], 1.0).unwrap(), vec![0, 2]);
    assert_eq!(top_p_select(&[0.0, 1.0, 0.0], 1.0).unwrap(), vec![1]);
}

#[test]
fn top_p_rejects_bad_thresholds() {
    for p in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(top_p_select(&[0.5, 0.5], p).is_err(), "p = {p}");
        assert!(TopPConfig { p }.validate().is_err());
    }
    assert!(top_p_select(&[], 0.5).is_err());
    assert!(TopPConfig::default().validate().is_ok());
}

#[test]
fn adamoe_splits_real_and_null_picks() {
    let logits = [2.0, -1.0, 0.5, 3.0, 1.0, -2.0];
    let sel = adamoe_select(&logits, 3, 3).unwrap();
    assert_eq!(sel.real, vec![0]);
    assert_eq!(sel.nulls, vec![0, 1]);
    let all_null = adamoe_select(&[-5.0, -5.0, 1.0, 1.0], 2, 2).unwrap();
    assert!(all_null.real.is_empty());
    assert_eq!(all_null.nulls, vec![0, 1]);
    assert!(adamoe_select(&[1.0], 2, 1).is_err());
    assert!(adamoe_select(&[1.0, f64::NAN], 1, 1).is_err());
    assert_eq!(AdaMoeConfig::for_experts(16, 3), AdaMoeConfig { n_null: 32, k_nominal: 3 });
}

#[test]
fn mean_active_counts_real_experts() {
    let rec = |selected: Vec<usize>| RoutingRecord {
        token_index: 0,
        pool: selected.clone(),
        gate_weights: vec![0.0; selected.len()],
        selected,
        null_mass: 0.0,
        full_probs: Vec::new(),
    };
    let recs = vec![rec(vec![0]), rec(vec![]), rec(vec![1, 2, 3]), rec(vec![0, 4])];
    assert_eq!(mean_active_experts(&recs).unwrap(), 1.5);
    assert!(mean_active_experts(&[]).is_err());
}

proptest! {
    #[test]
    fn top_p_sets_nest_and_reach_mass(raw in prop::collection::vec(0.01f64..1.0, 1..16), p1 in 0.01f64..1.0, p2 in 0.01f64..1.0) {
        let probs = normalized(&raw);
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let a = top_p_select(&probs, lo).unwrap();
        let b = top_p_select(&probs, hi).unwrap();
        prop_assert!(a.iter().all(|e| b.contains(e)));
        let mass: f64 = b.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass + 1e-9 >= hi);
        // the set is always a Top-k set of the same size
        prop_assert_eq!(top_k_select(&probs, b.len()).unwrap(), b);
    }

    #[test]
    fn adamoe_selects_exactly_k_nominal(raw in prop::collection::vec(-3.0f64..3.0, 6..18), k in 1usize..6) {
        let n_real = raw.len() / 3;
        let sel = adamoe_select(&raw, n_real, k).unwrap();
        prop_assert_eq!(sel.real.len() + sel.nulls.len(), k);
        prop_assert!(sel.real.iter().all(|&i| i < n_real));
        prop_assert!(sel.nulls.iter().all(|&i| i < raw.len() - n_real));
    }
}
