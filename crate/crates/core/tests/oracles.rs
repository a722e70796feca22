// Independent reference implementations checked against the library on
// random instances. The oracles below are written the slow, obvious way on
// purpose and share no code with the crate.

use lates_core::metrics::{accuracy, auroc, brier, ece, nll, square_loss};
use lates_core::numeric::seeded_rng;
use lates_core::probes::cross_entropy_loss_and_grad;
use lates_core::refnet::Mlp;
use lates_core::stack::{
    aggregator_gradient, aggregator_objective, fit_lates, fit_temperature, AggTrainConfig, LogitStack, LossKind,
};
use lates_core::stats::{
    f_survival, regularized_incomplete_beta, wilcoxon_signed_rank, PairedSample, Sided, WilcoxonMethod,
};
use lates_core::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

type TestRng = lates_core::numeric::Rng;

fn gauss(rng: &mut TestRng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_probs(rng: &mut TestRng, n: usize, k: usize) -> Matrix<f64> {
    let scale = rng.random_range(0.1..6.0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| scale * gauss(rng)).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn random_labels(rng: &mut TestRng, n: usize, k: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..k) as u32).collect()
}

fn oracle_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..p.len() {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

fn oracle_ece(probs: &Matrix<f64>, labels: &[u32], m: usize) -> f64 {
    let n = probs.rows() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let mut count = 0.0;
        let mut hits = 0.0;
        let mut conf_sum = 0.0;
        for i in 0..probs.rows() {
            let p = probs.row(i);
            let conf = p[oracle_argmax(p)];
            let inside = conf >= lo && (conf < hi || (b == m - 1 && conf <= 1.0));
            if inside {
                count += 1.0;
                conf_sum += conf;
                if oracle_argmax(p) == labels[i] as usize {
                    hits += 1.0;
                }
            }
        }
        if count > 0.0 {
            total += (count / n) * (hits / count - conf_sum / count).abs();
        }
    }
    total
}

fn oracle_brier(probs: &Matrix<f64>, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let sq: f64 = p.iter().map(|v| v * v).sum();
        total += sq - 2.0 * p[labels[i] as usize];
    }
    total / probs.rows() as f64
}

fn oracle_nll(probs: &Matrix<f64>, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.rows() {
        total -= probs.row(i)[labels[i] as usize].max(1e-12).ln();
    }
    total / probs.rows() as f64
}

fn oracle_accuracy(probs: &Matrix<f64>, labels: &[u32]) -> f64 {
    let hits = (0..probs.rows())
        .filter(|&i| oracle_argmax(probs.row(i)) == labels[i] as usize)
        .count();
    hits as f64 / probs.rows() as f64
}

/// Pair counting: P(conf of a correct example > conf of a wrong one), ties ½.
fn oracle_auroc(probs: &Matrix<f64>, labels: &[u32]) -> Option<f64> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let c = oracle_argmax(p);
        if c == labels[i] as usize {
            good.push(p[c]);
        } else {
            bad.push(p[c]);
        }
    }
    if good.is_empty() || bad.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for &g in &good {
        for &b in &bad {
            score += if g > b {
                1.0
            } else if g == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(score / (good.len() * bad.len()) as f64)
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = seeded_rng(31);
    for case in 0..200 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let mut probs = random_probs(&mut rng, n, k);
        if case % 5 == 0 {
            // coarse probabilities force tied confidences and exact bin edges
            for i in 0..n {
                let z: Vec<f64> = (0..k).map(|_| rng.random_range(1..4) as f64).collect();
                let s: f64 = z.iter().sum();
                probs.row_mut(i).iter_mut().zip(&z).for_each(|(p, v)| *p = v / s);
            }
        }
        let labels = random_labels(&mut rng, n, k);

        let (got_ece, _) = ece(&probs, &labels, 10).unwrap();
        assert!((got_ece - oracle_ece(&probs, &labels, 10)).abs() < 1e-10, "ece case {case}");
        let b = brier(&probs, &labels).unwrap();
        assert!((b - oracle_brier(&probs, &labels)).abs() < 1e-10, "brier case {case}");
        assert!((b - (square_loss(&probs, &labels).unwrap() - 1.0)).abs() < 1e-12, "affine case {case}");
        assert!((nll(&probs, &labels).unwrap() - oracle_nll(&probs, &labels)).abs() < 1e-10, "nll case {case}");
        assert!((accuracy(&probs, &labels).unwrap() - oracle_accuracy(&probs, &labels)).abs() < 1e-10);
        match oracle_auroc(&probs, &labels) {
            Some(want) => assert!((auroc(&probs, &labels).unwrap() - want).abs() < 1e-10, "auroc case {case}"),
            None => assert!(auroc(&probs, &labels).is_err(), "auroc case {case} should be undefined"),
        }
    }
}

fn random_stack(rng: &mut TestRng) -> (LogitStack, Vec<u32>, Vec<f64>) {
    let n = rng.random_range(3..=20);
    let d = rng.random_range(1..=4);
    let k = rng.random_range(2..=5);
    let slices: Vec<Matrix<f64>> = (0..d)
        .map(|_| {
            let data = (0..n * k).map(|_| 2.0 * gauss(rng)).collect();
            Matrix::from_vec(n, k, data).unwrap()
        })
        .collect();
    let beta = (0..d).map(|_| rng.random_range(0.05..1.5)).collect();
    (LogitStack::from_slices(&slices).unwrap(), random_labels(rng, n, k), beta)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut point = x.to_vec();
    (0..x.len())
        .map(|j| {
            point[j] = x[j] + h;
            let up = f(&point);
            point[j] = x[j] - h;
            let down = f(&point);
            point[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn aggregator_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(5);
    for kind in [LossKind::Nll, LossKind::Square] {
        for case in 0..20 {
            let (stack, labels, beta) = random_stack(&mut rng);
            let g = aggregator_gradient(&stack, &beta, &labels, kind).unwrap();
            let fd = central_diff(&beta, 1e-6, |b| aggregator_objective(&stack, b, &labels, kind, 0.0).unwrap());
            let e = rel_err(&g, &fd);
            assert!(e < 1e-6, "{kind:?} case {case}: relative error {e:e}");
        }
    }
}

#[test]
fn probe_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(6);
    for case in 0..20 {
        let n = rng.random_range(2..=15);
        let f = rng.random_range(1..=6);
        let k = rng.random_range(2..=4);
        let x = Matrix::from_vec(n, f, (0..n * f).map(|_| gauss(&mut rng)).collect()).unwrap();
        let labels = random_labels(&mut rng, n, k);
        let w = Matrix::from_vec(k, f, (0..k * f).map(|_| 0.5 * gauss(&mut rng)).collect()).unwrap();
        let b: Vec<f64> = (0..k).map(|_| 0.5 * gauss(&mut rng)).collect();
        let decay = if case % 2 == 0 { 0.0 } else { 0.1 };
        let (_, gw, gb) = cross_entropy_loss_and_grad(&w, &b, &x, &labels, decay);

        let mut params = w.as_slice().to_vec();
        params.extend_from_slice(&b);
        let mut analytic = gw.as_slice().to_vec();
        analytic.extend_from_slice(&gb);
        let fd = central_diff(&params, 1e-6, |p| {
            let wm = Matrix::from_vec(k, f, p[..k * f].to_vec()).unwrap();
            cross_entropy_loss_and_grad(&wm, &p[k * f..], &x, &labels, decay).0
        });
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-5, "case {case}: relative error {e:e}");
    }
}

#[test]
fn refnet_backprop_matches_finite_differences() {
    let mut rng = seeded_rng(8);
    for case in 0..20 {
        let depth = rng.random_range(2..=3);
        let mut widths = vec![rng.random_range(1..=3)];
        widths.extend((0..depth).map(|_| rng.random_range(2..=5)));
        widths.push(rng.random_range(2..=4));
        let k = *widths.last().unwrap();
        let mut net = Mlp::init(&widths, case as u64);
        // nonzero biases keep every pre-activation off the ReLU kink
        for l in net.layers.iter_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
        }
        let n = rng.random_range(2..=8);
        let x = Matrix::from_vec(n, widths[0], (0..n * widths[0]).map(|_| gauss(&mut rng)).collect()).unwrap();
        let labels = random_labels(&mut rng, n, k);
        let l2 = 1e-3;
        let (_, grads) = net.loss_and_grad(&x, &labels, l2);

        let flatten = |layers: &[lates_core::refnet::Dense]| {
            let mut v = Vec::new();
            for l in layers {
                v.extend_from_slice(l.weights.as_slice());
                v.extend_from_slice(&l.bias);
            }
            v
        };
        let params = flatten(&net.layers);
        let analytic = flatten(&grads);
        let fd = central_diff(&params, 1e-6, |p| {
            let mut probe = net.clone();
            let mut at = 0;
            for l in probe.layers.iter_mut() {
                let nw = l.weights.as_slice().len();
                l.weights.as_mut_slice().copy_from_slice(&p[at..at + nw]);
                at += nw;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&p[at..at + nb]);
                at += nb;
            }
            probe.loss(&x, &labels, l2)
        });
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-5, "case {case} widths {widths:?}: relative error {e:e}");
    }
}

/// Counts every one of the 2^n sign assignments.
fn enumerate_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let t: f64 = (0..n).filter(|j| mask >> j & 1 == 1).map(|j| ranks[j]).sum();
        if t <= w + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn oracle_midranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

#[test]
fn exact_wilcoxon_matches_sign_enumeration() {
    let mut rng = seeded_rng(12);
    for case in 0..60 {
        let n = rng.random_range(1..=14);
        // integer magnitudes produce ties among |d|
        let deltas: Vec<f64> = (0..n)
            .map(|_| {
                let mag = if case % 2 == 0 { rng.random_range(1..5) as f64 } else { rng.random_range(0.1..3.0) };
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect();
        let res = wilcoxon_signed_rank(&PairedSample::new(deltas.clone()).unwrap(), Sided::One).unwrap();
        assert_eq!(res.method, WilcoxonMethod::Exact);
        let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
        let ranks = oracle_midranks(&abs);
        let t_plus: f64 = ranks.iter().zip(&deltas).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
        let t_minus: f64 = ranks.iter().zip(&deltas).filter(|(_, &d)| d < 0.0).map(|(r, _)| r).sum();
        let w = t_plus.min(t_minus);
        assert!((res.w_statistic - w).abs() < 1e-12);
        let want = enumerate_lower_tail(&ranks, w);
        assert!((res.p_value - want).abs() < 1e-12, "case {case}: {} vs {want}", res.p_value);
    }
}

fn simpson(a: f64, b: f64, steps: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / steps as f64;
    let mut s = f(a) + f(b);
    for i in 1..steps {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

#[test]
fn incomplete_beta_matches_quadrature() {
    let mut rng = seeded_rng(13);
    for _ in 0..40 {
        // a, b >= 2 keeps the integrand smooth enough for Simpson
        let a = rng.random_range(2.0..8.0);
        let b = rng.random_range(2.0..8.0);
        let x = rng.random_range(0.01..0.99);
        let density = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
        let partial = simpson(0.0, x, 20_000, density);
        let whole = simpson(0.0, 1.0, 20_000, density);
        let want = partial / whole;
        let got = regularized_incomplete_beta(a, b, x);
        assert!((got - want).abs() < 1e-7, "I_{x}({a}, {b}) = {got}, quadrature {want}");
    }
}

#[test]
fn incomplete_beta_closed_forms() {
    for &x in &[0.05, 0.3, 0.5, 0.77, 0.99] {
        for &p in &[0.5, 1.0, 2.5, 7.0] {
            assert!((regularized_incomplete_beta(p, 1.0, x) - x.powf(p)).abs() < 1e-12);
            assert!((regularized_incomplete_beta(1.0, p, x) - (1.0 - (1.0 - x).powf(p))).abs() < 1e-12);
        }
        // I_x(½, ½) = (2/π) asin(√x)
        let want = 2.0 / std::f64::consts::PI * x.sqrt().asin();
        assert!((regularized_incomplete_beta(0.5, 0.5, x) - want).abs() < 1e-12);
    }
}

#[test]
fn f_survival_matches_density_quadrature() {
    for &(d1, d2) in &[(2.0f64, 4.0f64), (3.0, 10.0), (5.0, 20.0), (4.0, 6.0)] {
        let density = |f: f64| {
            let num = (d1 * f).powf(d1) * d2.powf(d2) / (d1 * f + d2).powf(d1 + d2);
            let beta = (libm::lgamma(d1 / 2.0) + libm::lgamma(d2 / 2.0) - libm::lgamma((d1 + d2) / 2.0)).exp();
            num.sqrt() / (f * beta)
        };
        for &f in &[0.3, 1.0, 2.5, 6.0] {
            // P(F > f) = 1 − ∫₀^f density; the density is bounded for d1 >= 2
            let cdf = simpson(1e-12, f, 200_000, density);
            let want = 1.0 - cdf;
            let got = f_survival(f, d1, d2);
            assert!((got - want).abs() < 1e-6, "F({d1},{d2}) at {f}: {got} vs {want}");
        }
    }
}

fn logits_with_temperature(rng: &mut TestRng, n: usize, k: usize, tau: f64) -> (Matrix<f64>, Vec<u32>) {
    // Labels are drawn from softmax(z) while the reported logits are τ·z,
    // so the calibrating temperature is τ.
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| 1.5 * gauss(rng)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut u = rng.random_range(0.0..1.0) * s;
        let mut y = k - 1;
        for (c, v) in e.iter().enumerate() {
            if u < *v {
                y = c;
                break;
            }
            u -= v;
        }
        labels.push(y as u32);
        rows.push(z.iter().map(|v| tau * v).collect::<Vec<f64>>());
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

fn temperature_nll(logits: &Matrix<f64>, labels: &[u32], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let z: Vec<f64> = logits.row(i).iter().map(|v| v / tau).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[labels[i] as usize];
    }
    total / logits.rows() as f64
}

#[test]
fn fit_temperature_agrees_with_dense_grid_search() {
    let mut rng = seeded_rng(21);
    for &true_tau in &[1.0, 3.0, 0.4] {
        let (logits, labels) = logits_with_temperature(&mut rng, 40_000, 4, true_tau);
        let fitted = fit_temperature(&logits, &labels).unwrap().tau();
        let best_on = |taus: Vec<f64>| {
            taus.into_iter()
                .map(|t| (temperature_nll(&logits, &labels, t), t))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1
        };
        let coarse = best_on((0..=300).map(|j| 0.2 * (30.0f64).powf(j as f64 / 300.0)).collect());
        let grid_best = best_on((0..=200).map(|j| coarse * (0.98 + 0.04 * j as f64 / 200.0)).collect());
        assert!((fitted - grid_best).abs() / grid_best < 1e-3, "fitted {fitted}, grid {grid_best}");
        assert!(
            temperature_nll(&logits, &labels, fitted) <= temperature_nll(&logits, &labels, grid_best) + 1e-9
        );
        let tol = if true_tau == 1.0 { 1e-2 } else { 0.05 * true_tau };
        assert!((fitted - true_tau).abs() < tol, "fitted {fitted} for generating τ {true_tau}");
    }
}

#[test]
fn fit_lates_reaches_grid_optimum_when_an_early_probe_is_predictive() {
    let mut rng = seeded_rng(22);
    let (n, k) = (600, 3);
    let mut informative = Matrix::zeros(n, k);
    let mut noise = Matrix::zeros(n, k);
    let labels = random_labels(&mut rng, n, k);
    for i in 0..n {
        for c in 0..k {
            let hit = if c == labels[i] as usize { 2.0 } else { 0.0 };
            informative.set(i, c, hit + gauss(&mut rng));
            noise.set(i, c, gauss(&mut rng));
        }
    }
    let stack = LogitStack::from_slices(&[informative, noise]).unwrap();
    let fitted = fit_lates(&stack, &labels, &AggTrainConfig::default()).unwrap();
    let obj = |b: &[f64]| aggregator_objective(&stack, b, &labels, LossKind::Nll, 0.0).unwrap();

    let mut grid_best = (f64::INFINITY, [0.0, 0.0]);
    for a in 0..=250 {
        for b in 0..=250 {
            let beta = [a as f64 * 0.02, b as f64 * 0.02];
            let v = obj(&beta);
            if v < grid_best.0 {
                grid_best = (v, beta);
            }
        }
    }
    let (b1, b2) = (fitted.beta[0], fitted.beta[1]);
    assert!(b1 > 5.0 * b2, "beta {:?}", fitted.beta);
    assert!(obj(&fitted.beta) < obj(&[0.0, 1.0]));
    assert!(obj(&fitted.beta) <= grid_best.0 + 1e-4, "fitted {} grid {}", obj(&fitted.beta), grid_best.0);
    assert!(
        (b1 - grid_best.1[0]).abs() < 0.05 && (b2 - grid_best.1[1]).abs() < 0.05,
        "fitted {:?}, grid {:?}",
        fitted.beta,
        grid_best.1
    );
}
