use std::sync::Arc;

use fedls::data::{partition_iid, synth_classification};
use fedls::fedsim::{client_update, run, select_clients, subset_mean_variance, FedConfig, LocalWork};
use fedls::lapsmooth::SmoothingOperator;
use fedls::objectives::{
    gradient_noise_energy, logistic_grad, quad_eval, quad_make, FederatedLogistic, LogisticModel,
};
use fedls::privacy::Subsampling;
use fedls::rng::substream;
use fedls::vecops;
use rand::seq::index;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn noisy_config(n: usize) -> FedConfig {
    FedConfig {
        n_clients: n,
        tau: 0.3,
        rounds: 6,
        local: LocalWork::Epochs(2),
        batch_size: 4,
        eta_l: 0.2,
        gamma: 0.95,
        clip: 0.5,
        sigma: 1.0,
        nu: 0.3,
        weight_decay: 1e-3,
        seed: 42,
        non_private: false,
        spectrum_rounds: vec![1, 6],
        ..FedConfig::default()
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let data = Arc::new(synth_classification(400, 12, 3, 2.0, 1).unwrap());
    let p = partition_iid(data, 20, 20, 1).unwrap();
    let obj = FederatedLogistic::new(&p, 3).unwrap();
    let cfg = noisy_config(20);
    let w0 = vec![0.0; 36];
    let one = pool(1).install(|| run(&obj, &cfg, &w0).unwrap());
    let four = pool(4).install(|| run(&obj, &cfg, &w0).unwrap());
    assert_eq!(one.w_out, four.w_out);
    assert_eq!(one.metrics.records, four.metrics.records);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    one.metrics.write_csv(&mut a).unwrap();
    four.metrics.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn poisson_selection_rate_matches_tau() {
    let cfg = FedConfig {
        n_clients: 200,
        tau: 0.1,
        subsampling: Subsampling::Poisson,
        ..FedConfig::default()
    };
    let total: usize = (0..500).map(|t| select_clients(&cfg, t).len()).sum();
    let mean = total as f64 / 500.0;
    // sd of the mean ≈ √(200·0.09/500) ≈ 0.19
    assert!((mean - 20.0).abs() < 1.0, "{mean}");
}

#[test]
fn subset_mean_variance_matches_simulation() {
    let mut rng = substream(9, 0, 0);
    let xs: Vec<Vec<f64>> = (0..30)
        .map(|j| (0..3).map(|k| ((j * 7 + k * 3) % 11) as f64 - 5.0).collect())
        .collect();
    let mut mean = vec![0.0; 3];
    for x in &xs {
        vecops::axpy(1.0 / 30.0, x, &mut mean);
    }
    for s in [1, 5, 29] {
        let trials = 20_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let mut m = vec![0.0; 3];
            for j in index::sample(&mut rng, 30, s) {
                vecops::axpy(1.0 / s as f64, &xs[j], &mut m);
            }
            acc += vecops::norm_sq(&vecops::sub(&m, &mean));
        }
        let mc = acc / trials as f64;
        let exact = subset_mean_variance(&xs, s).unwrap();
        assert!((mc - exact).abs() / exact < 0.05, "s={s}: {mc} vs {exact}");
    }
    assert_eq!(subset_mean_variance(&xs, 30).unwrap(), 0.0);
}

#[test]
fn replacing_one_client_moves_the_sum_by_at_most_two_clips() {
    let a = quad_make(5, 6, 0.1, 2.0, 3.0, 1).unwrap();
    let b = quad_make(5, 6, 0.1, 2.0, 3.0, 2).unwrap();
    let cfg = FedConfig {
        n_clients: 5,
        local: LocalWork::Steps(10),
        clip: 0.4,
        ..FedConfig::default()
    };
    let w = vec![1.0; 6];
    let mut sum_a = vec![0.0; 6];
    let mut sum_b = vec![0.0; 6];
    for j in 0..5 {
        let da = client_update(&a, j, &w, &cfg, 0.3, &mut substream(0, 0, j as u64)).unwrap();
        // only client 3 differs between the two neighbouring datasets
        let obj = if j == 3 { &b } else { &a };
        let db = client_update(obj, j, &w, &cfg, 0.3, &mut substream(0, 0, j as u64)).unwrap();
        vecops::axpy(1.0, &da, &mut sum_a);
        vecops::axpy(1.0, &db, &mut sum_b);
    }
    let diff = vecops::norm(&vecops::sub(&sum_a, &sum_b));
    assert!(diff > 0.0 && diff <= 2.0 * 0.4 + 1e-12);
}

#[test]
fn noiseless_full_participation_converges_on_quadratics() {
    let fam = quad_make(20, 8, 0.1, 1.0, 0.0, 3).unwrap();
    let cfg = FedConfig {
        n_clients: 20,
        rounds: 150,
        eta_l: 0.5,
        clip: 1e6,
        ..FedConfig::default()
    };
    let out = run(&fam, &cfg, &[0.0; 8]).unwrap();
    assert!(quad_eval(&fam, &out.w_out).unwrap().gap < 1e-8);
}

#[test]
fn smoothing_shrinks_gradient_noise() {
    let fam = quad_make(2, 16, 0.1, 1.0, 1.0, 0)
        .unwrap()
        .with_sample_noise(10, 1.0, 4)
        .unwrap();
    let batches: Vec<Vec<usize>> = (0..10).map(|i| vec![i, (i + 3) % 10]).collect();
    let w = vec![0.5; 16];
    let base = gradient_noise_energy(&fam, 0, &w, &batches, &SmoothingOperator::new(0.0, 16).unwrap()).unwrap();
    assert!(base > 0.0);
    for sigma in [0.5, 1.0, 3.0] {
        let op = SmoothingOperator::new(sigma, 16).unwrap();
        assert!(gradient_noise_energy(&fam, 0, &w, &batches, &op).unwrap() <= base);
    }
}

#[test]
fn separated_clusters_are_learned_and_chance_without_separation() {
    for (separation, check) in [(12.0, 0.99), (0.0, 0.0)] {
        let data = synth_classification(300, 4, 3, separation, 7).unwrap();
        let rows: Vec<usize> = (0..300).collect();
        let mut model = LogisticModel::zeros(3, 4).unwrap();
        for _ in 0..500 {
            let (_, g) = logistic_grad(&model, &data, &rows, 0.0).unwrap();
            vecops::axpy(-0.5, &g, &mut model.weights);
        }
        let acc = rows.iter().filter(|&&i| model.predict(data.row(i)) == data.labels[i]).count() as f64 / 300.0;
        if separation > 0.0 {
            assert!(acc > check, "{acc}");
        } else {
            // no bias feature and no signal: near chance
            assert!(acc < 0.5, "{acc}");
        }
    }
}
