//! Quick built-in checks: hash reference vectors, DCT round trips and
//! allocation budgets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dct::DctPlan;
use crate::hashing::{allocate_buckets, hash64};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn hash_vectors() -> Vec<Check> {
    [
        ("", 0xcbf2_9ce4_8422_2325u64),
        ("a", 0xaf63_dc4c_8601_ec8c),
        ("foobar", 0x8594_4171_f739_67e8),
    ]
    .iter()
    .map(|&(input, expect)| {
        let got = hash64(input.as_bytes());
        check(
            format!("fnv1a64({input:?})"),
            got == expect,
            format!("{got:#018x}, expected {expect:#018x}"),
        )
    })
    .collect()
}

fn dct_round_trips(rng: &mut ChaCha8Rng) -> Vec<Check> {
    [1usize, 3, 5, 11]
        .iter()
        .map(|&d| {
            let plan = DctPlan::new(d);
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let v: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let back = plan.idct2(&plan.dct2(&v).expect("sized")).expect("sized");
                worst = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
            check(format!("dct round trip d={d}"), worst < 1e-10, format!("max error {worst:.3e}"))
        })
        .collect()
}

fn allocation_budgets(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let schemes = [(0.25, 2.5), (1.0, 1.0), (2.5, 0.25)];
    schemes
        .iter()
        .map(|&(alpha, beta)| {
            let mut bad = None;
            for _ in 0..50 {
                let d = 2 * rng.gen_range(0..6) + 1;
                let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
                let k = rng.gen_range(2 * d - 1..=m * n * d * d);
                match allocate_buckets(d, m, n, k, alpha, beta) {
                    Ok(a) => {
                        let ok = a.counts.iter().sum::<usize>() == k
                            && a.counts.iter().zip(&a.band_sizes).all(|(&c, &s)| c >= 1 && c <= s);
                        if !ok {
                            bad = Some(format!("d={d} m={m} n={n} K={k}: counts {:?}", a.counts));
                        }
                    }
                    Err(e) => bad = Some(format!("d={d} m={m} n={n} K={k}: {e}")),
                }
                if bad.is_some() {
                    break;
                }
            }
            check(
                format!("allocation budget alpha={alpha} beta={beta}"),
                bad.is_none(),
                bad.unwrap_or_else(|| "50 random layers".into()),
            )
        })
        .collect()
}

/// Runs every check. Deterministic.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = hash_vectors();
    out.extend(dct_round_trips(&mut rng));
    out.extend(allocation_budgets(&mut rng));
    out
}

/// Fixed-width pass/fail table.
pub fn render(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:width$}  {}\n", c.name, c.detail));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} checks, {failed} failed\n", checks.len()));
    out
}
