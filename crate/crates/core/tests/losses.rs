use abp_core::autograd::Tape;
use abp_core::schedule::{loss_kd, loss_stage1, loss_stage2, stage2_objective};
use abp_core::tensor::Tensor;
use abp_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce_ref(s: &[Vec<f64>], y: &[usize]) -> f64 {
    s.iter().zip(y).map(|(r, &y)| -softmax(r, 1.0)[y].ln()).sum::<f64>() / s.len() as f64
}

fn kd_ref(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let total: f64 = s
        .iter()
        .zip(t)
        .map(|(s, t)| {
            let (p, q) = (softmax(t, tau), softmax(s, tau));
            p.iter().zip(&q).map(|(p, q)| p * (p.ln() - q.ln())).sum::<f64>()
        })
        .sum();
    total / s.len() as f64
}

fn total_ref(s: &[Vec<f64>], t: &[Vec<f64>], y: &[usize], tau: f64, lambda: f64) -> f64 {
    ce_ref(s, y) + lambda * kd_ref(s, t, tau)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.row_len()).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn kd_two_class_closed_form() {
    let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
    let s = Tensor::new(vec![1, 2], vec![0.0, 3f32.ln()]);
    let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let got = loss_kd(&s, &t, 1.0).unwrap() as f64;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn identical_logits_have_zero_divergence() {
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]);
    for tau in [0.5, 1.0, 3.0, 10.0] {
        assert!(loss_kd(&t, &t, tau).unwrap().abs() < 1e-6);
    }
}

#[test]
fn losses_match_reference_on_random_logits() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (b, c) = (r.random_range(1..6usize), r.random_range(2..12usize));
        let s = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-6.0..6.0)).collect());
        let t = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-6.0..6.0)).collect());
        let y: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let ce = loss_stage1(&s, &y).unwrap() as f64;
        assert!((ce - ce_ref(&rows(&s), &y)).abs() < 1e-4 * ce.abs().max(1.0));
        let kd = loss_kd(&s, &t, 3.0).unwrap() as f64;
        let want = kd_ref(&rows(&s), &rows(&t), 3.0);
        assert!((kd - want).abs() < 1e-4 * want.abs().max(1.0), "{kd} vs {want}");
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (tau, lambda) = (3.0f64, 9.0f64);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (b, c) = (4usize, 3usize);
    let s = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-2.0..2.0)).collect());
    let t = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-2.0..2.0)).collect());
    let y = vec![0, 2, 1, 2];

    let mut tape = Tape::new();
    let sv = tape.input_with_grad(s.clone());
    let (total, ce, kd) = stage2_objective(&mut tape, sv, &y, &t, tau as f32, lambda as f32);
    let combined = loss_stage2(tape.value(ce).item(), tape.value(kd).item(), lambda as f32);
    assert!((tape.value(total).item() - combined).abs() < 1e-5);
    tape.backward(total);
    let grad = tape.grad_of(sv).expect("logit gradient").clone();

    let (sr, tr) = (rows(&s), rows(&t));
    let h = 1e-5;
    for i in 0..b {
        for j in 0..c {
            let (mut up, mut down) = (sr.clone(), sr.clone());
            up[i][j] += h;
            down[i][j] -= h;
            let fd = (total_ref(&up, &tr, &y, tau, lambda) - total_ref(&down, &tr, &y, tau, lambda)) / (2.0 * h);
            let g = grad.data()[i * c + j] as f64;
            assert!(
                (g - fd).abs() <= 1e-3 * fd.abs() + 1e-5,
                "d/ds[{i}][{j}]: tape {g}, finite difference {fd}"
            );
        }
    }
}

#[test]
fn nonpositive_temperature_is_a_config_error() {
    let t = Tensor::zeros(&[1, 2]);
    assert!(matches!(loss_kd(&t, &t, 0.0), Err(Error::Config(_))));
    assert!(matches!(loss_kd(&t, &t, -1.0), Err(Error::Config(_))));
}

#[test]
fn non_finite_logits_are_numeric_errors() {
    let bad = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]);
    assert!(matches!(loss_stage1(&bad, &[0]), Err(Error::Numeric(_))));
    let inf = Tensor::new(vec![1, 2], vec![f32::INFINITY, 0.0]);
    assert!(matches!(loss_kd(&inf, &Tensor::zeros(&[1, 2]), 1.0), Err(Error::Numeric(_))));
}
