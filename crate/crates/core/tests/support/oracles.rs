//! Independent reference implementations for metric tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tabsynth::{Table, Value};

use super::dd::DD;

/// Random mixed table; about 5% of feature cells missing.
pub fn random_table(rng: &mut ChaCha8Rng, rows: usize) -> Table {
    let cats = ["a", "b", "c", "d"];
    let cells: Vec<Vec<String>> = (0..rows)
        .map(|_| {
            let mut r = vec![
                format!("{:.2}", rng.gen_range(-5.0..5.0)),
                cats[rng.gen_range(0..3)].to_string(),
                format!("{}", rng.gen_range(0..20)),
                cats[rng.gen_range(0..4)].to_string(),
                if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string(),
            ];
            for c in r.iter_mut().take(4) {
                if rng.gen_bool(0.05) {
                    c.clear();
                }
            }
            r
        })
        .collect();
    super::table(&["x", "colour", "count", "shape", "y"], &cells, "y")
}

pub fn brute_distance(a: &[Value], b: &[Value], cols: &[usize], scale: &[f64]) -> f64 {
    let mut d = 0.0;
    for &c in cols {
        d += match (&a[c], &b[c]) {
            (Value::Missing, Value::Missing) => 0.0,
            (Value::Num(x), Value::Num(y)) => (x - y).abs() / scale[c],
            (Value::Cat(x), Value::Cat(y)) => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
    }
    d
}

pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / (np as f64 * nn as f64)
}

pub fn dd_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = DD::from_usize(x.len());
    let sx = DD::sum(x.iter().map(|&v| DD::new(v)));
    let sy = DD::sum(y.iter().map(|&v| DD::new(v)));
    let sxy = DD::sum(x.iter().zip(y).map(|(&a, &b)| DD::new(a) * DD::new(b)));
    let sxx = DD::sum(x.iter().map(|&a| DD::new(a) * DD::new(a)));
    let syy = DD::sum(y.iter().map(|&b| DD::new(b) * DD::new(b)));
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    (cov / (vx * vy).sqrt()).to_f64()
}

pub fn dd_xlogx(p: DD) -> DD {
    if p.hi == 0.0 {
        DD::ZERO
    } else {
        p * p.ln()
    }
}

/// U(x|y) = I(x;y) / H(x), via the mutual-information form.
pub fn dd_theil(x: &[u8], y: &[u8]) -> f64 {
    let n = DD::from_usize(x.len());
    let mut hx = DD::ZERO;
    let mut mi = DD::ZERO;
    for a in 0..8u8 {
        let ca = x.iter().filter(|&&v| v == a).count();
        hx = hx - dd_xlogx(DD::from_usize(ca) / n);
        for b in 0..8u8 {
            let cb = y.iter().filter(|&&v| v == b).count();
            let cab = x.iter().zip(y).filter(|&(&u, &w)| u == a && w == b).count();
            if cab > 0 {
                let pab = DD::from_usize(cab) / n;
                let ratio = DD::from_usize(cab) * n / (DD::from_usize(ca) * DD::from_usize(cb));
                mi = mi + pab * ratio.ln();
            }
        }
    }
    (mi / hx).to_f64()
}

/// η = sqrt(1 − SS_within / SS_total).
pub fn dd_eta(cat: &[u8], num: &[f64]) -> f64 {
    let n = DD::from_usize(num.len());
    let mean = DD::sum(num.iter().map(|&v| DD::new(v))) / n;
    let total = DD::sum(num.iter().map(|&v| (DD::new(v) - mean) * (DD::new(v) - mean)));
    let mut within = DD::ZERO;
    for g in 0..8u8 {
        let members: Vec<f64> = cat.iter().zip(num).filter(|(&c, _)| c == g).map(|(_, &v)| v).collect();
        if members.is_empty() {
            continue;
        }
        let gm = DD::sum(members.iter().map(|&v| DD::new(v))) / DD::from_usize(members.len());
        within = within + DD::sum(members.iter().map(|&v| (DD::new(v) - gm) * (DD::new(v) - gm)));
    }
    (DD::ONE - within / total).sqrt().to_f64()
}
