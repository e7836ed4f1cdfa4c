//! A linear probe fit on task 1 of a 90-degree drifted stream should not
//! transfer to task 2.

use soul::data::{generate_synthetic_table, SyntheticSpec};

fn fit_logistic(x: &[Vec<f64>], y: &[u8]) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += err * v);
            gb += err;
        }
        let n = x.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 2.0 * g / n);
        b -= 2.0 * gb / n;
    }
    (w, b)
}

fn accuracy(model: &(Vec<f64>, f64), x: &[Vec<f64>], y: &[u8]) -> f64 {
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: f64 = xi.iter().zip(&model.0).map(|(a, b)| a * b).sum::<f64>() + model.1;
            (z > 0.0) as u8 == yi
        })
        .count();
    hits as f64 / y.len() as f64
}

#[test]
fn ninety_degree_drift_breaks_a_linear_probe() {
    let spec = SyntheticSpec {
        tasks: 2,
        samples_per_task: 1000,
        dims: 2,
        cir_per_task: vec![0.5],
        drift_angle_deg: 90.0,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let table = generate_synthetic_table(&spec).unwrap();
    let split = |g: usize| -> (Vec<Vec<f64>>, Vec<u8>) {
        table
            .records
            .iter()
            .zip(&table.groups)
            .filter(|(_, gr)| **gr == Some(g))
            .map(|(r, _)| (r.features.clone(), r.true_label))
            .unzip()
    };
    let (x1, y1) = split(0);
    let (x2, y2) = split(1);
    let probe = fit_logistic(&x1, &y1);
    assert!(accuracy(&probe, &x1, &y1) >= 0.99);
    assert!(accuracy(&probe, &x2, &y2) <= 0.6);
}

#[test]
fn measured_cir_matches_request() {
    let spec = SyntheticSpec {
        tasks: 2,
        samples_per_task: 1000,
        cir_per_task: vec![0.02, 0.02],
        ..SyntheticSpec::default()
    };
    let table = generate_synthetic_table(&spec).unwrap();
    for g in table.group_summaries() {
        assert!((g.cir - 0.02).abs() <= 1.0 / 1000.0);
    }
}
