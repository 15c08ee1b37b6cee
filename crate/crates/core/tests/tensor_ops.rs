use proptest::prelude::*;
use rand::Rng;
use vesseldiff::rng::stream;
use vesseldiff::tensor::{cross_entropy_logits, grad_check, Tape, Tensor};

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b })
}

#[test]
fn dominant_logit_wins_gumbel_max() {
    let mut rng = stream(1, &[]);
    let mut hits = 0;
    for _ in 0..10_000 {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(&[3], vec![50.0, 0.0, 0.0]).unwrap());
        let y = t.gumbel_softmax(l, 1.0, true, &mut rng).unwrap();
        hits += usize::from(argmax(t.value(y).data()) == 0);
    }
    assert!(hits as f64 / 1e4 > 0.999);
}

#[test]
fn low_temperature_is_nearly_one_hot() {
    let mut rng = stream(2, &[]);
    let mut sharp = 0;
    for _ in 0..10_000 {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(&[3], vec![5.0, 0.0, -1.0]).unwrap());
        let y = t.gumbel_softmax(l, 0.01, false, &mut rng).unwrap();
        let v = t.value(y).data();
        sharp += usize::from(v.iter().cloned().fold(0.0, f64::max) > 0.99);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // Gumbel perturbations occasionally close the gap to within a few temperatures.
    assert!(sharp as f64 / 1e4 > 0.99, "{sharp}");
}

#[test]
fn equal_logits_give_uniform_frequencies() {
    let mut rng = stream(3, &[]);
    let draws = 10_000;
    let mut counts = [0.0; 4];
    for _ in 0..draws {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[4]));
        let y = t.gumbel_softmax(l, 1.0, true, &mut rng).unwrap();
        counts[argmax(t.value(y).data())] += 1.0;
    }
    let (p, n) = (0.25, draws as f64);
    let sigma = (n * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c - n * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn grad_check_on_sum_of_squares() {
    let mut rng = stream(4, &[]);
    let x = Tensor::from_fn(&[5], |_| rng.random_range(-1.0..1.0));
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_on_cross_entropy() {
    let mut rng = stream(5, &[]);
    let x = Tensor::from_fn(&[2, 4], |_| rng.random_range(-2.0..2.0));
    let err = grad_check(|t, v| cross_entropy_logits(t, v, &[1, 3], &[1.0, 1.0]), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.softmax(v);
        for row in t.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_invokes_each_node_once(depth in 1usize..12) {
        let mut t = Tape::new();
        let mut v = t.leaf(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
        for k in 0..depth {
            v = if k % 2 == 0 { t.gelu(v) } else { t.scale(v, 1.1) };
        }
        let s = t.sum(v);
        t.backward(s).unwrap();
        prop_assert_eq!(t.backward_calls(), t.len());
    }
}
