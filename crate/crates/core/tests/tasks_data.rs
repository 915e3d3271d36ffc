use std::collections::BTreeSet;

use elastic_moe::tasks::{gen_cluster_teacher, split, Dataset, TaskConfig};

fn config(noise: f64) -> TaskConfig {
    TaskConfig { n_clusters: 6, d: 8, n_classes: 4, m_per_cluster: 300, noise, train_fraction: 0.8 }
}

/// Pocket perceptron on the samples of one cluster; returns the best training accuracy.
fn cluster_probe(ds: &Dataset, cluster: usize, classes: usize) -> f64 {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.meta.clusters[i] == cluster).collect();
    let d = ds.d();
    let mut w = vec![0.0; classes * d];
    let predict = |w: &[f64], x: &[f64]| {
        (0..classes)
            .map(|c| w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0
    };
    let score = |w: &[f64]| idx.iter().filter(|&&i| predict(w, ds.inputs.row(i)) == ds.targets[i]).count();
    let mut best = 0;
    for _ in 0..2000 {
        let mut mistakes = 0;
        for &i in &idx {
            let x = ds.inputs.row(i);
            let (y, p) = (ds.targets[i], predict(&w, x));
            if p != y {
                mistakes += 1;
                for k in 0..d {
                    w[y * d + k] += x[k];
                    w[p * d + k] -= x[k];
                }
            }
        }
        best = best.max(score(&w));
        if mistakes == 0 {
            break;
        }
    }
    best as f64 / idx.len() as f64
}

/// Multiclass perceptron with bias predicting the cluster of each sample.
fn cluster_identity_probe(ds: &Dataset, clusters: usize) -> f64 {
    let d = ds.d() + 1;
    let mut w = vec![0.0; clusters * d];
    let features = |i: usize| {
        let mut x = ds.inputs.row(i).to_vec();
        x.push(1.0);
        x
    };
    let predict = |w: &[f64], x: &[f64]| {
        (0..clusters)
            .map(|c| w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0
    };
    for _ in 0..50 {
        for i in 0..ds.len() {
            let x = features(i);
            let (y, p) = (ds.meta.clusters[i], predict(&w, &x));
            if p != y {
                for k in 0..d {
                    w[y * d + k] += x[k];
                    w[p * d + k] -= x[k];
                }
            }
        }
    }
    let correct = (0..ds.len()).filter(|&i| predict(&w, &features(i)) == ds.meta.clusters[i]).count();
    correct as f64 / ds.len() as f64
}

#[test]
fn clusters_are_linearly_separable() {
    let cfg = TaskConfig { noise: 0.1, ..TaskConfig::default() };
    assert_eq!((cfg.d, cfg.n_clusters), (16, 8));
    let ds = gen_cluster_teacher(&cfg, 11).unwrap();
    let acc = cluster_identity_probe(&ds, cfg.n_clusters);
    assert!(acc >= 0.99, "cluster probe accuracy {acc}");
}

#[test]
fn per_cluster_labels_are_linearly_separable() {
    let cfg = config(0.1);
    let ds = gen_cluster_teacher(&cfg, 17).unwrap();
    for c in 0..cfg.n_clusters {
        let acc = cluster_probe(&ds, c, cfg.n_classes);
        assert!(acc >= 0.99, "cluster {c}: probe accuracy {acc}");
    }
}

#[test]
fn clusters_need_different_functions() {
    let ds = gen_cluster_teacher(&config(0.5), 4).unwrap();
    let diverse = (0..6)
        .filter(|&c| {
            let labels: BTreeSet<usize> =
                (0..ds.len()).filter(|&i| ds.meta.clusters[i] == c).map(|i| ds.targets[i]).collect();
            labels.len() > 1
        })
        .count();
    assert!(diverse >= 4, "only {diverse} clusters carry more than one label");
}

#[test]
fn split_is_stratified_disjoint_and_deterministic() {
    let cfg = config(0.3);
    let ds = gen_cluster_teacher(&cfg, 2).unwrap();
    let (train, eval) = split(&ds, cfg.train_fraction, 9).unwrap();
    assert_eq!(train.len() + eval.len(), ds.len());
    assert_eq!(train.len(), (0.8 * ds.len() as f64).round() as usize);
    let a: BTreeSet<usize> = train.meta.source_index.iter().copied().collect();
    let b: BTreeSet<usize> = eval.meta.source_index.iter().copied().collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), ds.len());
    for c in 0..cfg.n_clusters {
        let n = train.meta.clusters.iter().filter(|&&k| k == c).count() as f64;
        assert!((n - 0.8 * cfg.m_per_cluster as f64).abs() <= 1.0, "cluster {c}: {n}");
    }
    for (i, &src) in train.meta.source_index.iter().enumerate() {
        assert_eq!(train.inputs.row(i), ds.inputs.row(src));
        assert_eq!(train.targets[i], ds.targets[src]);
    }
    let (train2, eval2) = split(&ds, cfg.train_fraction, 9).unwrap();
    assert_eq!(train, train2);
    assert_eq!(eval, eval2);
    let (train3, _) = split(&ds, cfg.train_fraction, 10).unwrap();
    assert_ne!(train.meta.source_index, train3.meta.source_index);
    assert!(split(&ds, 1.0, 0).is_err());
    assert!(split(&ds, 0.0, 0).is_err());
}

#[test]
fn moments_are_stable_across_seeds_and_scale_with_noise() {
    let traces: Vec<f64> = (0..4).map(|s| gen_cluster_teacher(&config(0.3), s).unwrap().moments().1).collect();
    let mean = traces.iter().sum::<f64>() / traces.len() as f64;
    for t in &traces {
        assert!((t - mean).abs() / mean < 0.5, "{traces:?}");
    }
    // within-cluster spread adds noise²·d to the trace of the covariance
    let low = gen_cluster_teacher(&config(0.1), 3).unwrap().moments().1;
    let high = gen_cluster_teacher(&config(1.0), 3).unwrap().moments().1;
    let gap = high - low;
    let want = (1.0 - 0.01) * 8.0;
    assert!((gap - want).abs() < 0.2 * want, "trace gap {gap} vs {want}");
}
