//! Cloud cost model: per-scheme estimates, scheme ranking, the spot bid rule
//! and storage savings from data reduction.
//!
//! Money is carried as exact decimals; amounts are rounded half-up to cents
//! only when rendered, so estimates stay exactly linear in their inputs.

use std::fs;
use std::path::Path;

use rust_decimal::prelude::*;
use rust_decimal::RoundingStrategy;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Pricing config shipped with the repository.
pub const SAMPLE_PRICING: &str = include_str!("../../../pricing.sample");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: String },
    #[error("need at least 2 pricing schemes, got {0}")]
    TooFewSchemes(usize),
    #[error("reduced size {after} GB exceeds original {before} GB")]
    Growth { before: String, after: String },
    #[error("scheme {0}: spot pricing has no upfront cost")]
    SpotUpfront(String),
    #[error("{0} is not a finite number")]
    NotFinite(&'static str),
    #[error("pricing config: {0}")]
    Config(String),
}

/// Converts through the shortest round-trip decimal text, so `0.96` becomes
/// exactly `0.96` rather than its binary approximation.
pub fn decimal_from_f64(field: &'static str, v: f64) -> Result<Decimal, CostError> {
    if !v.is_finite() {
        return Err(CostError::NotFinite(field));
    }
    Decimal::from_str(&format!("{v}"))
        .or_else(|_| Decimal::from_scientific(&format!("{v:e}")))
        .map_err(|e| CostError::Config(format!("{field}: {e}")))
}

fn non_negative(field: &'static str, v: Decimal) -> Result<Decimal, CostError> {
    if v.is_sign_negative() && !v.is_zero() {
        return Err(CostError::Negative {
            field,
            value: v.to_string(),
        });
    }
    Ok(v)
}

/// Half-up rounding to whole cents.
pub fn to_cents(v: Decimal) -> Decimal {
    v.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

fn de_decimal<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(f) => decimal_from_f64("rate", f).map_err(serde::de::Error::custom),
        Num::S(s) => Decimal::from_str(&s).map_err(serde::de::Error::custom),
    }
}

fn ser_decimal<S: Serializer>(v: &Decimal, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.normalize().to_string())
}

/// Dollar amount as text with exactly two decimals, e.g. `50.00`.
pub fn format_cents(v: Decimal) -> String {
    format!("{:.2}", to_cents(v))
}

fn ser_cents<S: Serializer>(v: &Decimal, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_cents(*v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingScheme {
    /// on_demand, spot, reserved or dedicated.
    pub name: String,
    /// Dollars per instance-hour.
    #[serde(deserialize_with = "de_decimal", serialize_with = "ser_decimal")]
    pub compute_rate: Decimal,
    #[serde(
        default,
        deserialize_with = "de_decimal",
        serialize_with = "ser_decimal"
    )]
    pub upfront: Decimal,
    /// Dollars per GB-month.
    #[serde(deserialize_with = "de_decimal", serialize_with = "ser_decimal")]
    pub storage_rate: Decimal,
}

impl PricingScheme {
    pub fn validate(&self) -> Result<(), CostError> {
        non_negative("compute_rate", self.compute_rate)?;
        non_negative("upfront", self.upfront)?;
        non_negative("storage_rate", self.storage_rate)?;
        if self.name == "spot" && !self.upfront.is_zero() {
            return Err(CostError::SpotUpfront(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct PricingFile {
    schemes: Vec<PricingScheme>,
}

/// Parses `{"schemes": [{name, compute_rate, upfront, storage_rate}, ...]}`.
/// A bare array of schemes is accepted too.
pub fn parse_pricing(text: &str) -> Result<Vec<PricingScheme>, CostError> {
    let schemes = match serde_json::from_str::<PricingFile>(text) {
        Ok(f) => f.schemes,
        Err(_) => serde_json::from_str::<Vec<PricingScheme>>(text)
            .map_err(|e| CostError::Config(e.to_string()))?,
    };
    for s in &schemes {
        s.validate()?;
    }
    Ok(schemes)
}

pub fn load_pricing(path: impl AsRef<Path>) -> Result<Vec<PricingScheme>, CostError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| CostError::Config(format!("{}: {e}", path.display())))?;
    parse_pricing(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Workload {
    #[serde(serialize_with = "ser_decimal")]
    pub data_gb: Decimal,
    /// Billed hours, boot time excluded.
    #[serde(serialize_with = "ser_decimal")]
    pub compute_hours: Decimal,
    pub instance_count: u64,
    #[serde(serialize_with = "ser_decimal")]
    pub storage_months: Decimal,
}

impl Workload {
    pub fn new(
        data_gb: f64,
        compute_hours: f64,
        instance_count: u64,
        storage_months: f64,
    ) -> Result<Self, CostError> {
        Ok(Workload {
            data_gb: non_negative("data_gb", decimal_from_f64("data_gb", data_gb)?)?,
            compute_hours: non_negative(
                "compute_hours",
                decimal_from_f64("compute_hours", compute_hours)?,
            )?,
            instance_count,
            storage_months: non_negative(
                "storage_months",
                decimal_from_f64("storage_months", storage_months)?,
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    #[serde(serialize_with = "ser_cents")]
    pub compute: Decimal,
    #[serde(serialize_with = "ser_cents")]
    pub storage: Decimal,
    #[serde(serialize_with = "ser_cents")]
    pub upfront: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub scheme: String,
    #[serde(flatten)]
    pub workload: Workload,
    #[serde(serialize_with = "ser_cents")]
    pub total_dollars: Decimal,
    pub breakdown: CostBreakdown,
}

impl CostEstimate {
    pub fn total_cents(&self) -> Decimal {
        to_cents(self.total_dollars)
    }
}

/// compute = rate · hours · instances; storage = rate · GB · months.
pub fn estimate(scheme: &PricingScheme, workload: &Workload) -> Result<CostEstimate, CostError> {
    scheme.validate()?;
    let compute =
        scheme.compute_rate * workload.compute_hours * Decimal::from(workload.instance_count);
    let storage = scheme.storage_rate * workload.data_gb * workload.storage_months;
    let upfront = scheme.upfront;
    Ok(CostEstimate {
        scheme: scheme.name.clone(),
        workload: *workload,
        total_dollars: compute + storage + upfront,
        breakdown: CostBreakdown {
            compute,
            storage,
            upfront,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEstimate {
    pub estimate: CostEstimate,
    /// Percent saved relative to the most expensive scheme.
    pub savings_pct: f64,
}

/// Estimates every scheme and sorts ascending by total (ties keep input
/// order).
pub fn compare(
    schemes: &[PricingScheme],
    workload: &Workload,
) -> Result<Vec<RankedEstimate>, CostError> {
    if schemes.len() < 2 {
        return Err(CostError::TooFewSchemes(schemes.len()));
    }
    let mut estimates = schemes
        .iter()
        .map(|s| estimate(s, workload))
        .collect::<Result<Vec<_>, _>>()?;
    estimates.sort_by_key(|e| e.total_dollars);
    let max = estimates.last().unwrap().total_dollars;
    Ok(estimates
        .into_iter()
        .map(|estimate| {
            let savings_pct = if max.is_zero() {
                0.0
            } else {
                ((max - estimate.total_dollars) / max * Decimal::ONE_HUNDRED)
                    .to_f64()
                    .unwrap_or(0.0)
            };
            RankedEstimate {
                estimate,
                savings_pct,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpotDecision {
    Start,
    Terminate,
}

/// Start iff the current spot price is strictly below the bid.
pub fn spot_decision(bid: Decimal, current_price: Decimal) -> SpotDecision {
    if current_price < bid {
        SpotDecision::Start
    } else {
        SpotDecision::Terminate
    }
}

/// Storage dollars saved by shrinking `before_gb` to `after_gb`.
pub fn reduction_savings(
    before_gb: Decimal,
    after_gb: Decimal,
    storage_rate: Decimal,
    months: Decimal,
) -> Result<Decimal, CostError> {
    non_negative("before_gb", before_gb)?;
    non_negative("after_gb", after_gb)?;
    non_negative("storage_rate", storage_rate)?;
    non_negative("months", months)?;
    if after_gb > before_gb {
        return Err(CostError::Growth {
            before: before_gb.to_string(),
            after: after_gb.to_string(),
        });
    }
    Ok((before_gb - after_gb) * storage_rate * months)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn scheme(name: &str, rate: Decimal, upfront: Decimal, storage: Decimal) -> PricingScheme {
        PricingScheme {
            name: name.into(),
            compute_rate: rate,
            upfront,
            storage_rate: storage,
        }
    }

    fn workload(gb: &str, hours: &str, n: u64, months: &str) -> Workload {
        Workload {
            data_gb: Decimal::from_str(gb).unwrap(),
            compute_hours: Decimal::from_str(hours).unwrap(),
            instance_count: n,
            storage_months: Decimal::from_str(months).unwrap(),
        }
    }

    #[test]
    fn zero_workload_costs_upfront() {
        let s = scheme("reserved", d("0.5"), d("1200"), d("0.1"));
        let e = estimate(&s, &workload("0", "0", 10, "3")).unwrap();
        assert_eq!(e.total_dollars, d("1200"));
    }

    #[test]
    fn bid_rate_for_two_hundred_instances() {
        let s = scheme("spot", d("0.96"), Decimal::ZERO, d("0.1"));
        let e = estimate(&s, &workload("0", "60.8", 200, "0")).unwrap();
        assert_eq!(e.breakdown.compute, d("11673.60"));
        assert_eq!(format!("{:.2}", e.total_cents()), "11673.60");
    }

    #[test]
    fn storage_doubles_exactly() {
        let s = scheme("spot", d("0.96"), Decimal::ZERO, d("0.023"));
        let a = estimate(&s, &workload("1234.5", "1", 1, "1")).unwrap();
        let b = estimate(&s, &workload("2469", "1", 1, "1")).unwrap();
        assert_eq!(b.breakdown.storage, a.breakdown.storage * Decimal::TWO);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_cents(d("0.125")), d("0.13"));
        assert_eq!(to_cents(d("0.124999")), d("0.12"));
    }

    #[test]
    fn compare_ranks_and_saves() {
        let w = workload("0", "1", 1, "0");
        let r = compare(
            &[
                scheme("on_demand", d("100"), Decimal::ZERO, Decimal::ZERO),
                scheme("spot", d("73"), Decimal::ZERO, Decimal::ZERO),
            ],
            &w,
        )
        .unwrap();
        assert_eq!(r[0].estimate.scheme, "spot");
        assert_eq!(r[0].savings_pct, 27.0);
        assert_eq!(r[1].savings_pct, 0.0);

        let same = scheme("a", d("2"), Decimal::ZERO, Decimal::ZERO);
        let r = compare(&[same.clone(), same], &w).unwrap();
        assert!(r.iter().all(|x| x.savings_pct == 0.0));

        let r = compare(
            &[
                scheme("b", d("40"), Decimal::ZERO, Decimal::ZERO),
                scheme("a", d("50"), Decimal::ZERO, Decimal::ZERO),
                scheme("c", d("10"), Decimal::ZERO, Decimal::ZERO),
            ],
            &w,
        )
        .unwrap();
        let totals: Vec<Decimal> = r.iter().map(|x| x.estimate.total_dollars).collect();
        assert_eq!(totals, vec![d("10"), d("40"), d("50")]);
        assert_eq!(r[0].savings_pct, 80.0);

        assert_eq!(compare(&[], &w).unwrap_err(), CostError::TooFewSchemes(0));
    }

    #[test]
    fn spot_rule() {
        assert_eq!(spot_decision(d("0.96"), d("0.50")), SpotDecision::Start);
        assert_eq!(spot_decision(d("0.96"), d("0.96")), SpotDecision::Terminate);
        assert_eq!(spot_decision(d("0.96"), d("1.2")), SpotDecision::Terminate);
    }

    #[test]
    fn savings_from_reduction() {
        assert_eq!(
            reduction_savings(d("2000"), d("1500"), d("0.10"), d("1")).unwrap(),
            d("50")
        );
        assert_eq!(
            reduction_savings(d("700"), d("700"), d("0.10"), d("1")).unwrap(),
            Decimal::ZERO
        );
        assert_eq!(
            reduction_savings(d("1300"), d("1000"), d("0.05"), d("2")).unwrap(),
            d("30")
        );
        assert!(matches!(
            reduction_savings(d("1"), d("2"), d("0.1"), d("1")),
            Err(CostError::Growth { .. })
        ));
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(Workload::new(-1.0, 1.0, 1, 1.0).is_err());
        let bad = scheme("x", d("-1"), Decimal::ZERO, Decimal::ZERO);
        assert!(estimate(&bad, &workload("1", "1", 1, "1")).is_err());
        let spot = scheme("spot", d("1"), d("5"), Decimal::ZERO);
        assert_eq!(spot.validate(), Err(CostError::SpotUpfront("spot".into())));
    }

    #[test]
    fn sample_config_parses() {
        let schemes = parse_pricing(SAMPLE_PRICING).unwrap();
        let names: Vec<&str> = schemes.iter().map(|s| s.name.as_str()).collect();
        for n in ["on_demand", "spot", "reserved", "dedicated"] {
            assert!(names.contains(&n), "{n}");
        }
        let spot = schemes.iter().find(|s| s.name == "spot").unwrap();
        assert_eq!(spot.compute_rate, d("0.96"));
    }

    proptest::proptest! {
        #[test]
        fn linear_in_each_quantity(
            gb in 0u32..100_000, hours in 0u32..10_000, n in 0u64..500, factor in 1u32..20,
        ) {
            let s = scheme("on_demand", d("1.321"), Decimal::ZERO, d("0.023"));
            let w = Workload {
                data_gb: Decimal::from(gb) / d("10"),
                compute_hours: Decimal::from(hours) / d("10"),
                instance_count: n,
                storage_months: Decimal::ONE,
            };
            let base = estimate(&s, &w).unwrap();
            let f = Decimal::from(factor);
            let scaled = |w2: Workload| estimate(&s, &w2).unwrap();
            let g = scaled(Workload { data_gb: w.data_gb * f, ..w });
            proptest::prop_assert_eq!(g.breakdown.storage, base.breakdown.storage * f);
            let h = scaled(Workload { compute_hours: w.compute_hours * f, ..w });
            proptest::prop_assert_eq!(h.breakdown.compute, base.breakdown.compute * f);
            let i = scaled(Workload { instance_count: n * factor as u64, ..w });
            proptest::prop_assert_eq!(i.breakdown.compute, base.breakdown.compute * f);
            proptest::prop_assert_eq!(
                base.total_dollars,
                base.breakdown.compute + base.breakdown.storage + base.breakdown.upfront
            );
        }

        #[test]
        fn raising_bid_never_terminates(bid in 0u32..10_000, price in 0u32..10_000, raise in 0u32..1000) {
            let (b, p) = (Decimal::new(bid as i64, 3), Decimal::new(price as i64, 3));
            if spot_decision(b, p) == SpotDecision::Start {
                proptest::prop_assert_eq!(
                    spot_decision(b + Decimal::new(raise as i64, 3), p),
                    SpotDecision::Start
                );
            }
        }
    }
}
