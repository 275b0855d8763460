//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

use mcvos::metrics::ScoredPopulations;
use mcvos::numerics::RngStream;
use rand::Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------------
// Detection metrics by brute force.

/// Twice the Mann-Whitney pair credit over `2·n·m`, counted pair by pair.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut credit2: u64 = 0;
    for &a in id {
        for &b in ood {
            credit2 += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    credit2 as f64 / (2 * id.len() * ood.len()) as f64
}

/// Average precision as the mean over positives of the precision at that
/// positive's own score. `pos` and `neg` are oriented so larger is more
/// positive.
pub fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut total = 0.0;
    for &s in pos {
        let tp = pos.iter().filter(|&&v| v >= s).count();
        let fp = neg.iter().filter(|&&v| v >= s).count();
        total += tp as f64 / (tp + fp) as f64;
    }
    total / pos.len() as f64
}

/// Sweeps every observed score as a threshold and returns the lowest FPR
/// among thresholds whose TPR is the smallest achievable value `≥ num/den`.
/// Counting is integral so the TPR test is exact.
pub fn brute_fpr(pos: &[f64], neg: &[f64], num: usize, den: usize) -> f64 {
    let mut best: Option<(usize, usize)> = None;
    for &t in pos.iter().chain(neg) {
        let tp = pos.iter().filter(|&&v| v >= t).count();
        if tp * den < num * pos.len() {
            continue;
        }
        let fp = neg.iter().filter(|&&v| v >= t).count();
        best = match best {
            Some((btp, bfp)) if btp < tp || (btp == tp && bfp <= fp) => Some((btp, bfp)),
            _ => Some((tp, fp)),
        };
    }
    let (_, fp) = best.expect("the lowest score reaches every TPR");
    fp as f64 / neg.len() as f64
}

pub fn negated(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

/// Random populations of size ≤ `max_n`; about half the instances use a
/// coarse integer grid so ties are common.
pub fn fuzz_populations(rng: &mut RngStream, max_n: usize) -> ScoredPopulations {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=max_n);
    let coarse = rng.random::<bool>();
    let shift: f64 = rng.random_range(-2.0..2.0);
    let mut draw = |offset: f64| -> f64 {
        if coarse {
            (rng.random_range(0..12) as f64 + offset).floor()
        } else {
            rng.sample::<f64, _>(StandardNormal) + offset
        }
    };
    let id = (0..n).map(|_| draw(shift)).collect();
    let ood = (0..m).map(|_| draw(0.0)).collect();
    ScoredPopulations::new(id, ood).unwrap()
}

// ---------------------------------------------------------------------------
// Double-double accumulation for the aleatoric-metric oracle.

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (hi, lo) = two_sum(s, e + self.lo + o.lo);
        Dd { hi, lo }
    }

    pub fn add_f(self, v: f64) -> Dd {
        self.add(Dd::new(v))
    }

    pub fn mul_f(self, v: f64) -> Dd {
        let p = self.hi * v;
        let e = self.hi.mul_add(v, -p) + self.lo * v;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div_f(self, v: f64) -> Dd {
        let q = self.hi / v;
        // one correction step: r = self − q·v
        let r = self.add(Dd::new(q).mul_f(-v));
        let (hi, lo) = two_sum(q, r.hi / v);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// `ln(max(x, floor))` refined by one Newton step in double-double, so the
/// result is accurate well beyond `f64`.
pub fn dd_ln_floor(x: Dd, floor: f64) -> Dd {
    let x = if x.to_f64() < floor {
        Dd::new(floor)
    } else {
        x
    };
    let y = x.to_f64().ln();
    // y ← y + x·e^{−y} − 1; e^{−y} in f64 is enough because the correction
    // term is already tiny.
    let corr = x.mul_f((-y).exp()).add_f(-1.0);
    Dd::new(y).add(corr)
}

/// Entropy with the same floor the library applies inside the logarithm.
pub fn dd_entropy(p: &[Dd], floor: f64) -> Dd {
    p.iter().fold(Dd::default(), |acc, &v| {
        acc.add(v.mul(dd_ln_floor(v, floor)).neg())
    })
}

pub struct SummaryOracle {
    pub mean_probs: Vec<f64>,
    pub entropy: f64,
    pub mutual_info: f64,
    pub ekl: f64,
    pub variance: f64,
    pub energy_mean: f64,
    pub energy_var: f64,
}

/// Entropy, MI, EKL, predictive variance and energy moments straight from
/// their definitions, accumulated in double-double.
pub fn summary_oracle(probs: &[Vec<f64>], energies: &[f64], floor: f64) -> SummaryOracle {
    let t = probs.len() as f64;
    let k = probs[0].len();
    let mean: Vec<Dd> = (0..k)
        .map(|c| {
            probs
                .iter()
                .fold(Dd::default(), |acc, row| acc.add_f(row[c]))
                .div_f(t)
        })
        .collect();
    let h_mean = dd_entropy(&mean, floor);
    let expected_h = probs
        .iter()
        .fold(Dd::default(), |acc, row| {
            let r: Vec<Dd> = row.iter().map(|&v| Dd::new(v)).collect();
            acc.add(dd_entropy(&r, floor))
        })
        .div_f(t);
    let ekl = probs
        .iter()
        .fold(Dd::default(), |acc, row| {
            (0..k).fold(acc, |acc, c| {
                let diff =
                    dd_ln_floor(mean[c], floor).add(dd_ln_floor(Dd::new(row[c]), floor).neg());
                acc.add(mean[c].mul(diff))
            })
        })
        .div_f(t);
    let variance = (0..k)
        .fold(Dd::default(), |acc, c| {
            let v = probs
                .iter()
                .fold(Dd::default(), |a, row| {
                    let d = Dd::new(row[c]).add(mean[c].neg());
                    a.add(d.mul(d))
                })
                .div_f(t);
            acc.add(v)
        })
        .div_f(k as f64);
    let e_mean = energies
        .iter()
        .fold(Dd::default(), |acc, &e| acc.add_f(e))
        .div_f(t);
    let e_var = energies
        .iter()
        .fold(Dd::default(), |acc, &e| {
            let d = Dd::new(e).add(e_mean.neg());
            acc.add(d.mul(d))
        })
        .div_f(t);
    SummaryOracle {
        mean_probs: mean.iter().map(|m| m.to_f64()).collect(),
        entropy: h_mean.to_f64(),
        mutual_info: h_mean.add(expected_h.neg()).to_f64(),
        ekl: ekl.to_f64(),
        variance: variance.to_f64(),
        energy_mean: e_mean.to_f64(),
        energy_var: e_var.to_f64(),
    }
}

/// A random `T × K` logit matrix; the scale spans near-uniform to
/// saturated softmax outputs that hit the probability floor.
pub fn fuzz_logits(rng: &mut RngStream) -> mcvos::numerics::Matrix {
    let t = rng.random_range(1..=30);
    let k = rng.random_range(2..=10);
    let scale = [0.05, 1.0, 5.0, 40.0][rng.random_range(0..4)];
    let shift: f64 = rng.random_range(-10.0..10.0);
    let data = (0..t * k)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal) + shift)
        .collect();
    mcvos::numerics::Matrix::new(t, k, data).unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
