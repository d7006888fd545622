use fedcil::data::{make_synthetic_mixture, make_tiny_digits, LabeledDataset};
use fedcil::taskstream::build_task_streams;

/// Multinomial logistic regression trained by full-batch gradient descent.
fn linear_probe_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let (d, c) = (train.data_dim(), train.num_classes());
    let mut w = vec![0.0; c * (d + 1)];
    let n = train.len() as f64;
    for _ in 0..300 {
        let mut grad = vec![0.0; w.len()];
        for (i, &y) in train.labels().iter().enumerate() {
            let x = train.samples().row(i);
            let p = softmax(&logits(&w, x, c));
            for k in 0..c {
                let g = p[k] - f64::from(u8::from(k == y));
                let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                for j in 0..d {
                    row[j] += g * x[j];
                }
                row[d] += g;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / n;
        }
    }
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let s = logits(&w, test.samples().row(i), c);
            let best = (0..c).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            best == y
        })
        .count();
    correct as f64 / test.len() as f64
}

fn logits(w: &[f64], x: &[f64], c: usize) -> Vec<f64> {
    let d = x.len();
    (0..c)
        .map(|k| {
            let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
            row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
        })
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[test]
fn tiny_digits_are_linearly_separable() {
    let train = make_tiny_digits(11).unwrap();
    let test = make_tiny_digits(12).unwrap();
    assert_eq!(train.num_classes(), 10);
    let acc = linear_probe_accuracy(&train, &test);
    assert!(acc >= 0.95, "linear probe accuracy {acc}");
}

#[test]
fn standard_streams_cover_every_class_once_per_client() {
    let ds = make_synthetic_mixture(10, 400, 4, 1).unwrap();
    let streams = build_task_streams(&ds, 5, 2, 5, 1).unwrap();
    for s in &streams {
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
