use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};

use crate::error::{Error, Result};

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Margins of `[[a, b], [c, d]]`: row sums, first column sum, total.
fn margins(t: [[u64; 2]; 2]) -> (u64, u64, u64, u64) {
    let r1 = t[0][0] + t[0][1];
    let r2 = t[1][0] + t[1][1];
    let c1 = t[0][0] + t[1][0];
    (r1, r2, c1, r1 + r2)
}

/// Numerator of the hypergeometric probability of the table whose top-left
/// cell is `x`; the shared denominator is `C(n, c1)`.
fn weight(r1: u64, r2: u64, c1: u64, x: u64) -> BigUint {
    if x > c1 {
        return BigUint::from(0u32);
    }
    binomial(r1, x) * binomial(r2, c1 - x)
}

fn validate(table: [[i64; 2]; 2]) -> Result<[[u64; 2]; 2]> {
    if table.iter().flatten().any(|&v| v < 0) {
        return Err(Error::invalid(
            "fisher_exact",
            format!("negative cell in {table:?}"),
        ));
    }
    Ok(table.map(|r| r.map(|v| v as u64)))
}

/// Exact probability of the observed table given its margins.
pub fn hypergeometric_table_prob(table: [[i64; 2]; 2]) -> Result<f64> {
    let t = validate(table)?;
    let (r1, r2, c1, n) = margins(t);
    let p = BigRational::new(
        BigInt::from(weight(r1, r2, c1, t[0][0])),
        BigInt::from(binomial(n, c1)),
    );
    Ok(p.to_f64().unwrap_or(f64::NAN))
}

/// Two-sided Fisher exact test by the probability-mass rule: the sum of the
/// probabilities of every table with the same margins that is no more likely
/// than the observed one. Computed in exact rational arithmetic.
pub fn fisher_exact(table: [[i64; 2]; 2]) -> Result<f64> {
    let t = validate(table)?;
    let (r1, r2, c1, n) = margins(t);
    if n == 0 {
        return Ok(1.0);
    }
    let observed = weight(r1, r2, c1, t[0][0]);
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let mut mass = BigUint::from(0u32);
    for x in lo..=hi {
        let w = weight(r1, r2, c1, x);
        if w <= observed {
            mass += w;
        }
    }
    let p = BigRational::new(BigInt::from(mass), BigInt::from(binomial(n, c1)));
    Ok(p.to_f64().unwrap_or(f64::NAN).min(1.0))
}
