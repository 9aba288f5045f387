//! Test-only oracles shared by the integration suites: adaptive
//! Gauss-Kronrod quadrature of the Rényi divergence of the sampled Gaussian
//! mixture, central finite differences, and dataset location.

#![allow(dead_code)]

use std::collections::BinaryHeap;
use std::path::PathBuf;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and |Kronrod - Gauss| on `[a, b]`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for (j, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let s = f(c - h * x) + f(c + h * x);
        k += w * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Piece {
    err: f64,
    a: f64,
    b: f64,
    value: f64,
}

impl PartialEq for Piece {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Piece {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Globally adaptive Gauss-Kronrod integration: bisects the piece with the
/// largest error estimate until the summed error is below
/// `rel_tol * |integral|`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, initial_pieces: usize, rel_tol: f64) -> f64 {
    let mut heap = BinaryHeap::new();
    let width = (b - a) / initial_pieces as f64;
    for i in 0..initial_pieces {
        let lo = a + width * i as f64;
        let hi = if i + 1 == initial_pieces { b } else { lo + width };
        let (value, err) = gk15(&f, lo, hi);
        heap.push(Piece { err, a: lo, b: hi, value });
    }
    let mut total: f64 = heap.iter().map(|p| p.value).sum();
    let mut err: f64 = heap.iter().map(|p| p.err).sum();
    for _ in 0..200_000 {
        if err <= rel_tol * total.abs() || err < 1e-300 {
            break;
        }
        let worst = heap.pop().expect("non-empty");
        total -= worst.value;
        err -= worst.err;
        let mid = 0.5 * (worst.a + worst.b);
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (value, e) = gk15(&f, lo, hi);
            total += value;
            err += e;
            heap.push(Piece { err: e, a: lo, b: hi, value });
        }
    }
    // Summing smallest-first limits rounding in the total.
    let mut values: Vec<f64> = heap.into_iter().map(|p| p.value).collect();
    values.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    values.iter().sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// `(1/(alpha-1)) ln E_{x~N(0,s^2)} [(1+r(x))^power]` where `1 + r` is the
/// density ratio of `(1-q) N(0,s^2) + q N(1,s^2)` to `N(0,s^2)`.
///
/// The integrand is `phi (exp(power L) - 1 - power r)` with `L = ln(1+r)`;
/// since `E[r] = 0` this is `A - 1` without cancellation at small `q`. When
/// the moment is huge the integrand is rescaled by `exp(-M)`.
fn moment_quadrature(q: f64, sigma: f64, alpha: u32, power: f64) -> f64 {
    let var = sigma * sigma;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let ln_1mq = (-q).ln_1p();
    let ln_q = q.ln();
    let ln_phi = move |x: f64| ln_norm - x * x / (2.0 * var);
    let u = move |x: f64| (2.0 * x - 1.0) / (2.0 * var);
    let big_l = move |x: f64| log_add_exp(ln_1mq, ln_q + u(x));

    let lo = -40.0 * sigma - f64::from(alpha);
    let hi = f64::from(alpha) + 40.0 * sigma;
    let scan = 40_000;
    let m = (0..=scan)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / scan as f64;
            ln_phi(x) + power * big_l(x)
        })
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);

    let integrand = move |x: f64| {
        let lp = ln_phi(x);
        let pl = power * big_l(x);
        if m == 0.0 && pl < 50.0 {
            // phi * (e^{pL} - 1 - p r), arranged to keep the small difference exact
            let r = q * u(x).exp_m1();
            lp.exp() * (pl.exp_m1() - power * r)
        } else {
            // the same quantity scaled by exp(-m); r = q (e^u - 1)
            let main = (lp + pl - m).exp();
            let base = (lp - m).exp();
            let linear = power * q * ((lp + u(x) - m).exp() - base);
            main - base - linear
        }
    };
    let pieces = 4 * (hi - lo).ceil() as usize;
    let i = integrate(integrand, lo, hi, pieces, 1e-10);
    let ln_a = if m == 0.0 { i.ln_1p() } else { m + (i + (-m).exp()).ln() };
    ln_a / f64::from(alpha - 1)
}

/// Rényi divergence of order `alpha` between the sampled Gaussian mixture
/// and the base Gaussian, in both orientations; the mechanism's RDP is the
/// larger of the two.
pub fn rdp_by_quadrature(q: f64, sigma: f64, alpha: u32) -> (f64, f64) {
    let forward = moment_quadrature(q, sigma, alpha, f64::from(alpha));
    let reverse = moment_quadrature(q, sigma, alpha, 1.0 - f64::from(alpha));
    (forward, reverse)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Directory with the four canonical MNIST IDX files: `$MNIST_DIR`, or
/// `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
