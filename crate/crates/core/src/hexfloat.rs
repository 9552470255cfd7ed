//! C99-style hexadecimal float text (`0x1.8p+1`), used to store logits
//! losslessly in JSON.

use crate::error::{Error, Result};

pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let mut frac = format!("{mantissa:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{exp:+}")
    }
}

pub fn parse(s: &str) -> Result<f64> {
    let bad = || Error::Format(format!("invalid hexadecimal float {s:?}"));
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let value = match body {
        "nan" => f64::NAN,
        "inf" => f64::INFINITY,
        _ => {
            let body = body
                .strip_prefix("0x")
                .or_else(|| body.strip_prefix("0X"))
                .ok_or_else(bad)?;
            let (digits, exp) = body.split_once(['p', 'P']).ok_or_else(bad)?;
            let exp: i64 = exp.parse().map_err(|_| bad())?;
            let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
            if int_part.is_empty() && frac_part.is_empty() {
                return Err(bad());
            }
            // Accumulate at most 64 significant bits exactly, then scale.
            let mut acc: u64 = 0;
            let mut shift: i64 = 0;
            let mut sticky = false;
            for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
                let d = c.to_digit(16).ok_or_else(bad)? as u64;
                let in_frac = i >= int_part.len();
                if acc >> 60 == 0 {
                    acc = (acc << 4) | d;
                    if in_frac {
                        shift -= 4;
                    }
                } else {
                    sticky |= d != 0;
                    if !in_frac {
                        shift += 4;
                    }
                }
            }
            compose(acc, sticky, shift + exp)
        }
    };
    Ok(if neg { -value } else { value })
}

/// `acc · 2^exp`, rounded to nearest even; `sticky` marks nonzero digits
/// beyond `acc`.
fn compose(acc: u64, sticky: bool, exp: i64) -> f64 {
    if acc == 0 {
        return 0.0;
    }
    let top = 63 - acc.leading_zeros() as i64;
    if top + exp > 1023 {
        return f64::INFINITY;
    }
    // Index of the lowest bit of `acc` that survives.
    let keep_from = if top + exp >= -1022 { top - 52 } else { -1074 - exp };
    if keep_from <= 0 {
        return acc as f64 * pow2(exp);
    }
    if keep_from > 64 {
        return 0.0;
    }
    let mut m = if keep_from == 64 { 0 } else { acc >> keep_from };
    let half = 1u64 << (keep_from - 1);
    let dropped = acc & (half | (half - 1));
    if dropped & half != 0 && (dropped & (half - 1) != 0 || sticky || m & 1 == 1) {
        m += 1;
    }
    m as f64 * pow2(exp + keep_from)
}

/// Exact power of two, including the subnormal range.
fn pow2(e: i64) -> f64 {
    if e < -1022 {
        f64::from_bits(1u64 << (e + 1074).max(0))
    } else if e > 1023 {
        f64::INFINITY
    } else {
        f64::from_bits(((e + 1023) as u64) << 52)
    }
}
