//! Flat parameter vectors exchanged between server and clients.
//!
//! Wire encoding (all integers big-endian):
//!
//! ```text
//! u16 layout_id byte length | layout_id (UTF-8) | u32 element count | count x binary64
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Params<T: Scalar = f64> {
    values: Vec<T>,
    layout_id: String,
}

impl<T: Scalar> Params<T> {
    pub fn new(values: Vec<T>, layout_id: impl Into<String>) -> Result<Self> {
        let layout_id = layout_id.into();
        if values.is_empty() {
            return Err(Error::InvalidParams("empty parameter vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value at index {i}")));
        }
        if layout_id.len() > u16::MAX as usize {
            return Err(Error::InvalidParams("layout id too long".into()));
        }
        Ok(Self { values, layout_id })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn layout_id(&self) -> &str {
        &self.layout_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Replaces the values, keeping the layout. Fails if the length changes
    /// or a value is not finite.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(self.mismatch(&self.layout_id, values.len()));
        }
        Self::new(values, self.layout_id.clone())
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        self.values.len() == other.values.len() && self.layout_id == other.layout_id
    }

    pub fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(self.mismatch(&other.layout_id, other.values.len()))
        }
    }

    fn mismatch(&self, found: &str, found_len: usize) -> Error {
        Error::LayoutMismatch {
            expected: self.layout_id.clone(),
            expected_len: self.values.len(),
            found: found.to_string(),
            found_len,
        }
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.layout_id.len() + 4 + 8 * self.values.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layout_id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.layout_id.as_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_be_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.as_f64().to_be_bytes());
        }
    }

    /// Decodes exactly one encoded vector; trailing bytes are an error.
    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let (p, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after parameter vector",
                bytes.len() - used
            )));
        }
        Ok(p)
    }

    /// Decodes one vector from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = |what: &str| Error::Decode(format!("truncated parameter vector ({what})"));
        let id_len = u16::from_be_bytes(bytes.get(0..2).ok_or_else(|| short("layout length"))?.try_into().unwrap()) as usize;
        let mut pos = 2;
        let id_bytes = bytes.get(pos..pos + id_len).ok_or_else(|| short("layout id"))?;
        let layout_id = std::str::from_utf8(id_bytes)
            .map_err(|e| Error::Decode(format!("layout id is not UTF-8: {e}")))?
            .to_string();
        pos += id_len;
        let count = u32::from_be_bytes(bytes.get(pos..pos + 4).ok_or_else(|| short("element count"))?.try_into().unwrap()) as usize;
        pos += 4;
        let body = bytes.get(pos..pos + 8 * count).ok_or_else(|| short("elements"))?;
        let values = body
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_be_bytes(c.try_into().unwrap())))
            .collect();
        pos += 8 * count;
        let p = Self::new(values, layout_id).map_err(|e| Error::Decode(e.to_string()))?;
        Ok((p, pos))
    }
}

/// Element-wise `sum(w_i * p_i) / sum(w_i)`.
pub fn weighted_mean<T: Scalar>(items: &[(&Params<T>, u64)]) -> Result<Params<T>> {
    let (first, _) = items.first().ok_or(Error::EmptyAggregate)?;
    for (p, _) in &items[1..] {
        first.ensure_compatible(p)?;
    }
    let total: u64 = items.iter().map(|(_, w)| *w).sum();
    if total == 0 {
        return Err(Error::ZeroTotalWeight);
    }
    let total = T::from_u64(total).expect("weight conversion");
    let mut acc = vec![T::zero(); first.len()];
    for (p, w) in items {
        if *w == 0 {
            continue;
        }
        // Normalising the weight first keeps the result invariant (to
        // rounding) under scaling of all weights.
        let share = T::from_u64(*w).expect("weight conversion") / total;
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += share * *v;
        }
    }
    first.with_values(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn pv(values: &[f64]) -> Params {
        Params::new(values.to_vec(), "test").unwrap()
    }

    fn naive_mean(items: &[(Vec<f64>, u64)]) -> Vec<f64> {
        let total: f64 = items.iter().map(|(_, w)| *w as f64).sum();
        let len = items[0].0.len();
        let mut out = Vec::with_capacity(len);
        for j in 0..len {
            let mut s = 0.0;
            for (v, w) in items {
                s += *w as f64 * v[j];
            }
            out.push(s / total);
        }
        out
    }

    #[test]
    fn round_trip_single_zero() {
        let p = pv(&[0.0]);
        assert_eq!(Params::<f64>::deserialize(&p.serialize()).unwrap(), p);
    }

    #[test]
    fn encoded_length_matches_layout() {
        let p = pv(&[1.0, 2.0]);
        let header = 2 + "test".len();
        assert_eq!(p.serialize().len(), header + 4 + 16);
        assert_eq!(p.encoded_len(), header + 4 + 16);
    }

    #[test]
    fn random_thousand_round_trips_bit_exact() {
        let mut rng = Pcg64::seed_from_u64(11);
        let values: Vec<f64> = (0..1000).map(|_| rng.random_range(-1e6..1e6)).collect();
        let p = pv(&values);
        let back = Params::<f64>::deserialize(&p.serialize()).unwrap();
        for (a, b) in p.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.layout_id(), "test");
    }

    #[test]
    fn f32_round_trips_through_binary64() {
        let p = Params::<f32>::new(vec![0.1, -3.5e-7, 1.0e30], "f32").unwrap();
        assert_eq!(Params::<f32>::deserialize(&p.serialize()).unwrap(), p);
    }

    #[test]
    fn rejects_invalid_vectors() {
        assert!(Params::<f64>::new(vec![], "x").is_err());
        assert!(Params::new(vec![1.0, f64::NAN], "x").is_err());
        assert!(Params::new(vec![f64::INFINITY], "x").is_err());
        let mut bytes = pv(&[1.0, 2.0]).serialize();
        bytes.pop();
        assert!(matches!(Params::<f64>::deserialize(&bytes), Err(Error::Decode(_))));
    }

    #[test]
    fn weighted_mean_arithmetic() {
        let a = pv(&[1.0, 3.0]);
        let b = pv(&[3.0, 5.0]);
        let m = weighted_mean(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(m.values(), &[2.5, 4.5]);
    }

    #[test]
    fn weighted_mean_single_item_is_identity() {
        let a = pv(&[0.3, -7.25, 1e-9]);
        assert_eq!(weighted_mean(&[(&a, 17)]).unwrap(), a);
    }

    #[test]
    fn weighted_mean_errors_are_distinct() {
        let a = pv(&[1.0]);
        let b = pv(&[1.0, 2.0]);
        let c = Params::new(vec![1.0], "other").unwrap();
        assert!(matches!(weighted_mean::<f64>(&[]), Err(Error::EmptyAggregate)));
        assert!(matches!(weighted_mean(&[(&a, 1), (&b, 1)]), Err(Error::LayoutMismatch { .. })));
        assert!(matches!(weighted_mean(&[(&a, 1), (&c, 1)]), Err(Error::LayoutMismatch { .. })));
        assert!(matches!(weighted_mean(&[(&a, 0), (&a, 0)]), Err(Error::ZeroTotalWeight)));
    }

    #[test]
    fn weighted_mean_matches_scalar_loop() {
        let mut rng = Pcg64::seed_from_u64(5);
        let items: Vec<(Vec<f64>, u64)> = (0..5)
            .map(|_| ((0..40).map(|_| rng.random_range(-10.0..10.0)).collect(), rng.random_range(1..500)))
            .collect();
        let params: Vec<Params> = items.iter().map(|(v, _)| pv(v)).collect();
        let refs: Vec<(&Params, u64)> = params.iter().zip(&items).map(|(p, (_, w))| (p, *w)).collect();
        let got = weighted_mean(&refs).unwrap();
        for (g, e) in got.values().iter().zip(naive_mean(&items)) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }

    fn vectors(n: usize) -> impl Strategy<Value = Vec<(Vec<f64>, u64)>> {
        prop::collection::vec((prop::collection::vec(-100.0f64..100.0, n), 1u64..1000), 1..8)
    }

    proptest! {
        #[test]
        fn serialization_round_trips(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 1..64), id in "[a-z:0-9]{0,20}") {
            let p = Params::new(values, id).unwrap();
            prop_assert_eq!(Params::<f64>::deserialize(&p.serialize()).unwrap(), p);
        }

        #[test]
        fn permutation_invariant(items in vectors(6), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let params: Vec<Params> = items.iter().map(|(v, _)| pv(v)).collect();
            let mut refs: Vec<(&Params, u64)> = params.iter().zip(&items).map(|(p, (_, w))| (p, *w)).collect();
            let a = weighted_mean(&refs).unwrap();
            refs.shuffle(&mut Pcg64::seed_from_u64(seed));
            let b = weighted_mean(&refs).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn equal_weights_give_plain_mean(items in vectors(5), w in 1u64..100) {
            let params: Vec<Params> = items.iter().map(|(v, _)| pv(v)).collect();
            let refs: Vec<(&Params, u64)> = params.iter().map(|p| (p, w)).collect();
            let got = weighted_mean(&refs).unwrap();
            let n = items.len() as f64;
            for j in 0..5 {
                let plain: f64 = items.iter().map(|(v, _)| v[j]).sum::<f64>() / n;
                prop_assert!((got.values()[j] - plain).abs() <= 1e-12);
            }
        }

        #[test]
        fn weight_scaling_invariant(items in vectors(5), k in 2u64..50) {
            let params: Vec<Params> = items.iter().map(|(v, _)| pv(v)).collect();
            let a: Vec<(&Params, u64)> = params.iter().zip(&items).map(|(p, (_, w))| (p, *w)).collect();
            let b: Vec<(&Params, u64)> = params.iter().zip(&items).map(|(p, (_, w))| (p, *w * k)).collect();
            let (a, b) = (weighted_mean(&a).unwrap(), weighted_mean(&b).unwrap());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
