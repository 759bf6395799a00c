//! Exact rational scaling ratios between adjacent pyramid scales.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, ScnError};

/// A reduced fraction `num / den` strictly inside (0, 1).
///
/// Ratios are kept exact so that pyramid sizes such as `round(9 * 2/3)` never
/// depend on binary floating-point representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub const HALF: Ratio = Ratio { num: 1, den: 2 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(ScnError::config(format!(
                "ratio {num}/{den} must lie strictly between 0 and 1"
            )));
        }
        let g = gcd(num as u64, den as u64) as u32;
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `max(1, round(size * ratio))`, ties rounded away from zero.
    pub fn scale_size(&self, size: usize) -> usize {
        let num = self.num as u128;
        let den = self.den as u128;
        let scaled = (2 * size as u128 * num + den) / (2 * den);
        (scaled as usize).max(1)
    }

    /// The integer stride `1/ratio`, when the ratio is an integer reciprocal.
    pub fn integer_stride(&self) -> Option<usize> {
        (self.num == 1).then_some(self.den as usize)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn parse_decimal(s: &str) -> Option<(u64, u64)> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if frac.len() > 9 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let den = 10u64.pow(frac.len() as u32);
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some((int * den + frac, den))
}

impl FromStr for Ratio {
    type Err = ScnError;

    /// Accepts `"2/3"` or an exact decimal such as `"0.75"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || ScnError::config(format!("cannot parse ratio '{s}'"));
        let (num, den) = if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| bad())?;
            let d: u64 = d.trim().parse().map_err(|_| bad())?;
            (n, d)
        } else {
            parse_decimal(s).ok_or_else(bad)?
        };
        if den == 0 {
            return Err(bad());
        }
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        let num = u32::try_from(num).map_err(|_| bad())?;
        let den = u32::try_from(den).map_err(|_| bad())?;
        Ratio::new(num, den)
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        let text = match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s,
            Repr::Number(x) => format!("{x}"),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}
