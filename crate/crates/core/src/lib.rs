//! Learning, certifying, and deploying robust hybrid control barrier functions.
//!
//! The crate is organised bottom-up:
//!
//! - [`hybrid`]: hybrid control systems with bounded model uncertainty, RK4
//!   flow integration with guard localisation, and hybrid-arc simulation.
//! - [`compass_gait`]: the compass-gait biped used as the evaluation plant.
//! - [`toy`]: small planar plants with closed-form barrier functions.
//! - [`net`]: the twice-differentiable tanh network `h(z; θ)` with exact
//!   state gradients and mixed parameter/state derivatives.
//! - [`datasets`]: expert demonstrations, ε-ball covers, and boundary-ring samples.
//! - [`train`]: robust flow/jump margins, the empirical Lagrangian, and the
//!   primal-dual iteration.
//! - [`verifier`]: Lipschitz and ε-net based post-hoc certification.
//! - [`filter`]: min-norm runtime safety filters and closed-loop simulation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod compass_gait;
pub mod datasets;
pub mod error;
pub mod filter;
pub mod hybrid;
pub mod net;
pub mod spatial;
pub mod toy;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Deterministic sub-seed for the stream identified by `parts` (SplitMix64 mixing).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut x: u64| {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    };
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}
