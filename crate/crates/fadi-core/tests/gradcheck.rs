//! Finite-difference checks for every hand-derived backward pass, on
//! focused cases. The broad 100-seed sweeps live in the acceptance suite.

mod common;

use common::{check_gradient, random_matrix, random_vec, rng};

use fadi_core::losses::{
    arcface_backward, arcface_logits, cosface_backward, cosface_logits, cross_entropy,
    margin_loss_sample, margin_loss_sample_grad, smooth_l1, smooth_l1_grad,
    softmax_cross_entropy_grad, LabelPartition,
};
use fadi_core::nethead::{
    relu_backward_slice, relu_slice, softmax, CosineClassifier, DualHead, LinearLayer, Matrix,
};
use rand::Rng;

/// Random linear functional so the scalar loss exercises every output.
fn random_probe(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    random_vec(rng, n)
}

#[test]
fn linear_layer_gradients_match_finite_differences() {
    let mut r = rng(11);
    for case in 0..10 {
        let (out, inp) = (4, 3);
        let w = random_matrix(&mut r, out, inp);
        let b = random_matrix(&mut r, out, 1);
        let x = random_vec(&mut r, inp);
        let probe = random_probe(&mut r, out);

        let layer = LinearLayer::new(w.clone(), b.clone()).unwrap();
        let grads = layer
            .backward(&Matrix::column(x.clone()), &Matrix::column(probe.clone()))
            .unwrap();

        let loss = |w: &Matrix, b: &Matrix, x: &[f64]| -> f64 {
            let layer = LinearLayer::new(w.clone(), b.clone()).unwrap();
            layer.apply(x).iter().zip(&probe).map(|(y, p)| y * p).sum()
        };

        check_gradient(&format!("linear{case}.weight"), w.data(), grads.weight.data(), 1e-6, |i, v| {
            let mut w2 = w.clone();
            w2.data_mut()[i] = v;
            loss(&w2, &b, &x)
        });
        check_gradient(&format!("linear{case}.bias"), b.data(), grads.bias.data(), 1e-6, |i, v| {
            let mut b2 = b.clone();
            b2.data_mut()[i] = v;
            loss(&w, &b2, &x)
        });
        check_gradient(&format!("linear{case}.input"), &x, grads.input.data(), 1e-6, |i, v| {
            let mut x2 = x.clone();
            x2[i] = v;
            loss(&w, &b, &x2)
        });
    }
}

#[test]
fn relu_gradient_matches_away_from_zero() {
    let mut r = rng(12);
    for _ in 0..10 {
        // keep entries away from the kink at 0
        let x: Vec<f64> = random_vec(&mut r, 8)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let probe = random_probe(&mut r, 8);
        let analytic = relu_backward_slice(&x, &probe);
        check_gradient("relu.input", &x, &analytic, 1e-6, |i, v| {
            let mut x2 = x.clone();
            x2[i] = v;
            relu_slice(&x2).iter().zip(&probe).map(|(y, p)| y * p).sum()
        });
    }
}

#[test]
fn cosine_logits_gradients_match() {
    let mut r = rng(13);
    for case in 0..10 {
        let (classes, dim) = (5, 8);
        let w = random_matrix(&mut r, classes, dim);
        let x = random_vec(&mut r, dim);
        let probe = random_probe(&mut r, classes);
        let cls = CosineClassifier::new(w.clone(), 20.0).unwrap();
        let (gw, gx) = cls.logits_backward(&x, &probe).unwrap();

        let loss = |w: &Matrix, x: &[f64]| -> f64 {
            let cls = CosineClassifier::new(w.clone(), 20.0).unwrap();
            cls.logits(x).unwrap().iter().zip(&probe).map(|(p, c)| p * c).sum()
        };
        check_gradient(&format!("cosine{case}.weight"), w.data(), gw.data(), 1e-5, |i, v| {
            let mut w2 = w.clone();
            w2.data_mut()[i] = v;
            loss(&w2, &x)
        });
        check_gradient(&format!("cosine{case}.input"), &x, &gx, 1e-5, |i, v| {
            let mut x2 = x.clone();
            x2[i] = v;
            loss(&w, &x2)
        });
    }
}

#[test]
fn softmax_cross_entropy_gradient_matches() {
    let mut r = rng(14);
    for _ in 0..10 {
        let classes = 6;
        let logits = random_vec(&mut r, classes);
        let label = r.gen_range(0..classes);
        let probs = softmax(&logits);
        let analytic = softmax_cross_entropy_grad(&probs, label).unwrap();
        check_gradient("softmax_ce.logits", &logits, &analytic, 1e-6, |i, v| {
            let mut l2 = logits.clone();
            l2[i] = v;
            cross_entropy(&softmax(&l2), label).unwrap()
        });
    }
}

#[test]
fn margin_loss_gradient_matches_away_from_kinks() {
    let mut r = rng(15);
    let eps = 1e-7;
    let mut checked = 0;
    while checked < 10 {
        let classes = 5;
        let s = softmax(&random_vec(&mut r, classes));
        let label = r.gen_range(0..classes);
        // stay away from the positive-part kink
        if s.iter().enumerate().any(|(j, &sj)| j != label && (s[label] - sj).abs() < 1e-3) {
            continue;
        }
        checked += 1;
        let analytic = margin_loss_sample_grad(&s, label, eps).unwrap();
        check_gradient("margin.s", &s, &analytic, 1e-5, |i, v| {
            let mut s2 = s.clone();
            s2[i] = v;
            margin_loss_sample(&s2, label, eps).unwrap()
        });
    }
}

#[test]
fn smooth_l1_gradient_matches_away_from_transition() {
    let mut r = rng(16);
    for _ in 0..10 {
        let n = 6;
        let target = random_vec(&mut r, n);
        let pred: Vec<f64> = target
            .iter()
            .map(|t| {
                let mut d: f64 = r.gen_range(-2.0..2.0);
                if (d.abs() - 1.0).abs() < 1e-3 {
                    d += 0.05;
                }
                t + d
            })
            .collect();
        let analytic = smooth_l1_grad(&pred, &target).unwrap();
        check_gradient("smooth_l1.pred", &pred, &analytic, 1e-6, |i, v| {
            let mut p2 = pred.clone();
            p2[i] = v;
            smooth_l1(&p2, &target).unwrap()
        });
    }
}

#[test]
fn cosface_and_arcface_gradients_match() {
    let mut r = rng(17);
    let part = LabelPartition::contiguous(3, 2); // labels 0..3 base, 3..5 novel, 5 bg
    for case in 0..10 {
        let (classes, dim) = (6, 8);
        let w = random_matrix(&mut r, classes, dim);
        let x = random_vec(&mut r, dim);
        let label = r.gen_range(0..classes);
        let probe = random_probe(&mut r, classes);
        let cls = CosineClassifier::new(w.clone(), 20.0).unwrap();

        let (gw, gx) = cosface_backward(&cls, &x, &probe).unwrap();
        let cos_loss = |w: &Matrix, x: &[f64]| -> f64 {
            let cls = CosineClassifier::new(w.clone(), 20.0).unwrap();
            cosface_logits(&cls, x, label, 0.35, false, &part)
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(p, c)| p * c)
                .sum()
        };
        check_gradient(&format!("cosface{case}.weight"), w.data(), gw.data(), 1e-5, |i, v| {
            let mut w2 = w.clone();
            w2.data_mut()[i] = v;
            cos_loss(&w2, &x)
        });
        check_gradient(&format!("cosface{case}.input"), &x, &gx, 1e-5, |i, v| {
            let mut x2 = x.clone();
            x2[i] = v;
            cos_loss(&w, &x2)
        });

        let m = 0.5;
        let cos_label = cls.cosines(&x).unwrap()[label];
        if cos_label.abs() > 0.9 {
            continue; // keep away from the arccos endpoints
        }
        let (gw, gx) = arcface_backward(&cls, &x, label, m, false, &part, &probe).unwrap();
        let arc_loss = |w: &Matrix, x: &[f64]| -> f64 {
            let cls = CosineClassifier::new(w.clone(), 20.0).unwrap();
            arcface_logits(&cls, x, label, m, false, &part)
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(p, c)| p * c)
                .sum()
        };
        check_gradient(&format!("arcface{case}.weight"), w.data(), gw.data(), 1e-5, |i, v| {
            let mut w2 = w.clone();
            w2.data_mut()[i] = v;
            arc_loss(&w2, &x)
        });
        check_gradient(&format!("arcface{case}.input"), &x, &gx, 1e-5, |i, v| {
            let mut x2 = x.clone();
            x2[i] = v;
            arc_loss(&w, &x2)
        });
    }
}

#[test]
fn dual_head_classifier_gradients_match() {
    let mut r = rng(18);
    for case in 0..10 {
        let (dim, hidden, b, n) = (6, 5, 3, 2);
        let mut g_base = LinearLayer::new(random_matrix(&mut r, hidden, dim), random_matrix(&mut r, hidden, 1)).unwrap();
        let mut g_novel = LinearLayer::new(random_matrix(&mut r, hidden, dim), random_matrix(&mut r, hidden, 1)).unwrap();
        g_base.frozen = true;
        g_novel.frozen = true;
        let wb = random_matrix(&mut r, b, hidden);
        let wn = random_matrix(&mut r, n + 1, hidden);
        let q = random_vec(&mut r, dim);
        let label = r.gen_range(0..b + n + 1);

        let build = |wb: &Matrix, wn: &Matrix| {
            DualHead::new(
                g_base.clone(),
                g_novel.clone(),
                CosineClassifier::new(wb.clone(), 20.0).unwrap(),
                CosineClassifier::new(wn.clone(), 20.0).unwrap(),
            )
            .unwrap()
        };
        let head = build(&wb, &wn);
        let act = head.forward(&q).unwrap();
        let grad_logits = softmax_cross_entropy_grad(&act.probs, label).unwrap();
        let grads = head.backward(&act, &grad_logits).unwrap();

        let loss = |wb: &Matrix, wn: &Matrix| -> f64 {
            let head = build(wb, wn);
            cross_entropy(&head.forward(&q).unwrap().probs, label).unwrap()
        };
        check_gradient(&format!("dual{case}.cls_base"), wb.data(), grads.cls_base.data(), 1e-5, |i, v| {
            let mut w2 = wb.clone();
            w2.data_mut()[i] = v;
            loss(&w2, &wn)
        });
        check_gradient(&format!("dual{case}.cls_novel"), wn.data(), grads.cls_novel.data(), 1e-5, |i, v| {
            let mut w2 = wn.clone();
            w2.data_mut()[i] = v;
            loss(&wb, &w2)
        });
    }
}
