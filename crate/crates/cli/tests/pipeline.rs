use scalebayes::config::ExperimentConfig;
use scalebayes::dataset::generate;
use scalebayes::executor::map_jobs_on;
use scalebayes::runner::{execute, load_dataset};
use serde_json::{json, Value};

fn config(model: Value, algorithm: Value, chains: usize, workers: usize) -> ExperimentConfig {
    ExperimentConfig::from_value(&json!({
        "schema": "scalebayes.experiment/1",
        "model": model,
        "data_seed": 21,
        "seed": 22,
        "algorithm": algorithm,
        "iterations": 1500,
        "chains": chains,
        "workers": workers,
    }))
    .unwrap()
}

fn gaussian(truth: &[f64], n: usize) -> Value {
    json!({ "kind": "gaussian", "truth": truth, "n": n, "prior_var": 2.0, "noise_var": 0.5 })
}

#[test]
fn gaussian_oracle_is_the_conjugate_posterior() {
    let cfg = config(gaussian(&[1.0, -2.0, 0.5], 300), json!({ "id": "mh", "scale": 0.1 }), 1, 1);
    let ds = generate(&cfg.model, cfg.data_seed).unwrap();
    let oracle = ds.oracle.as_ref().unwrap();
    let (d, n) = (3, 300);
    let prec = 1.0 / 2.0 + n as f64 / 0.5;
    for i in 0..d {
        let sum: f64 = ds.data.x.iter().skip(i).step_by(d).sum();
        let mean = sum / 0.5 / prec;
        assert!((oracle.posterior_mean[i] - mean).abs() < 1e-12);
        for j in 0..d {
            let expect = if i == j { 1.0 / prec } else { 0.0 };
            assert!((oracle.posterior_cov[i][j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn logistic_labels_follow_the_model() {
    let truth = [0.8, -0.5, 0.3];
    let model = json!({ "kind": "logistic_regression", "truth": truth, "n": 20000 });
    let cfg = config(model, json!({ "id": "mh", "scale": 0.1 }), 1, 1);
    let ds = generate(&cfg.model, cfg.data_seed).unwrap();
    assert_eq!(ds.data.labels.len(), 20000);
    assert!(ds.data.labels.iter().all(|y| *y == 1.0 || *y == -1.0));
    let positives = ds.data.labels.iter().filter(|y| **y > 0.0).count() as f64;
    let p: Vec<f64> = ds
        .data
        .features
        .chunks_exact(3)
        .map(|x| 1.0 / (1.0 + (-x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>()).exp()))
        .collect();
    let expected: f64 = p.iter().sum();
    let se = p.iter().map(|q| q * (1.0 - q)).sum::<f64>().sqrt();
    assert!((positives - expected).abs() < 3.0 * se, "{positives} vs {expected} ± {se}");
    assert!(ds.oracle.is_none());
}

#[test]
fn non_oracle_models_report_unavailable_metrics() {
    let model = json!({ "kind": "logistic_regression", "truth": [0.5, -0.5], "n": 300 });
    let cfg = config(model, json!({ "id": "mh", "scale": 0.1 }), 2, 1);
    let ds = load_dataset(&cfg, None).unwrap();
    let art = execute(&cfg, &ds).unwrap();
    for key in ["mean_error", "mean_error_over_mcse", "var_ratio"] {
        assert_eq!(art.summary["oracle"][key], "unavailable");
    }
    assert!(art.error_curves_csv.is_none());
}

#[test]
fn consensus_sends_no_messages_before_aggregation() {
    let cfg = config(gaussian(&[0.3], 400), json!({ "id": "consensus", "scale": 0.2, "combine": "weighted" }), 1, 4);
    let ds = load_dataset(&cfg, None).unwrap();
    let art = execute(&cfg, &ds).unwrap();
    let report = &art.summary["algorithm_report"][0];
    assert_eq!(report["inter_worker_messages_before_aggregation"], 0);
    assert_eq!(report["shards"], 4);
}

#[test]
fn single_chain_summaries_mark_between_chain_diagnostics_unavailable() {
    let cfg = config(gaussian(&[0.3], 100), json!({ "id": "mh", "scale": 0.2 }), 1, 1);
    let ds = load_dataset(&cfg, None).unwrap();
    let art = execute(&cfg, &ds).unwrap();
    assert_eq!(art.summary["rhat"], "unavailable");
    assert_eq!(art.summary["warmup"], 750);
    assert!(art.summary["acceptance_rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn chains_do_not_depend_on_thread_count() {
    let cfg = config(gaussian(&[0.3, 0.1], 100), json!({ "id": "mh", "scale": 0.2 }), 6, 1);
    let ds = load_dataset(&cfg, None).unwrap();
    let whole = execute(&cfg, &ds).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    // Each chain alone must reproduce its slot of the pooled run.
    let singles = map_jobs_on(1, 6, |k| {
        let mut one = cfg.clone();
        one.chains = k + 1;
        execute(&one, &ds).map(|a| a.chains[k].clone())
    })
    .unwrap();
    for (a, b) in whole.chains.iter().zip(&singles) {
        assert_eq!(bits(a.as_slice()), bits(b.as_slice()));
    }
    let threaded = map_jobs_on(4, 3, |_| execute(&cfg, &ds).map(|a| a.summary)).unwrap();
    assert!(threaded.iter().all(|s| *s == whole.summary));
}
