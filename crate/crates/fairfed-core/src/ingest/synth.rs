//! Built-in synthetic datasets.
//!
//! Offline stand-ins for the usual census-income and recidivism benchmarks.
//! Rows are drawn from a seeded generative model whose marginals (group
//! imbalance, per-group base rates, feature-label correlations) are tuned to
//! resemble the originals, so the fairness dynamics downstream look familiar.
//! Generation is deterministic given (rows, seed) and the output is plain CSV
//! that flows through the normal load/encode pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::{ColumnRole, IngestError, Schema};
use crate::rng::derive_rng;

pub const ADULT_SYNTH: &str = "adult-synth";
pub const COMPAS_SYNTH: &str = "compas-synth";
pub const DEFAULT_ROWS: usize = 6000;

/// Returns (csv text, schema) for a named builtin, or UnknownDataset.
pub fn generate(name: &str, rows: usize, seed: u64) -> Result<(String, Schema), IngestError> {
    match name {
        ADULT_SYNTH => Ok((adult_synth_csv(rows, seed), adult_synth_schema())),
        COMPAS_SYNTH => Ok((compas_synth_csv(rows, seed), compas_synth_schema())),
        other => Err(IngestError::UnknownDataset(other.to_string())),
    }
}

pub fn is_builtin(name: &str) -> bool {
    matches!(name, ADULT_SYNTH | COMPAS_SYNTH)
}

pub fn adult_synth_schema() -> Schema {
    let mut columns = BTreeMap::new();
    columns.insert("age".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("education_num".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("hours_per_week".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("capital_gain".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("relationship".to_string(), ColumnRole::FeatureCategorical);
    columns.insert("workclass".to_string(), ColumnRole::FeatureCategorical);
    columns.insert("occupation".to_string(), ColumnRole::FeatureCategorical);
    columns.insert("sex".to_string(), ColumnRole::Sensitive);
    columns.insert("income".to_string(), ColumnRole::Label);
    Schema {
        columns,
        label_positive: ">50K".to_string(),
        sensitive_positive: "Male".to_string(),
        missing_markers: vec!["?".to_string()],
        sensitive_as_feature: true,
    }
}

fn sigmoid(z: f64) -> f64 {
    crate::model::sigmoid(z)
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[(&'a str, f64)]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (name, p) in options {
        acc += p;
        if u < acc {
            return name;
        }
    }
    options.last().unwrap().0
}

/// Census-income style data: binary sex (male privileged, about two thirds of
/// rows) and a >50K label whose base rate is roughly 0.30 for men and 0.11
/// for women, driven by education, age, hours, capital gains, and marriage.
pub fn adult_synth_csv(rows: usize, seed: u64) -> String {
    let mut rng = derive_rng(seed, "adult-synth", &[rows as u64]);
    let age_dist: Normal<f64> = Normal::new(38.0, 12.0).unwrap();
    let edu_dist: Normal<f64> = Normal::new(10.0, 2.5).unwrap();
    let hours_dist: Normal<f64> = Normal::new(40.0, 10.0).unwrap();
    let gain_dist: LogNormal<f64> = LogNormal::new(8.0, 1.0).unwrap();

    let mut csv = String::with_capacity(rows * 64);
    csv.push_str("age,education_num,hours_per_week,capital_gain,relationship,workclass,occupation,sex,income\n");
    for _ in 0..rows {
        let male = rng.random_bool(0.67);
        let age = age_dist.sample(&mut rng).round().clamp(17.0, 80.0);
        let edu = edu_dist.sample(&mut rng).round().clamp(1.0, 16.0);
        let hours = (hours_dist.sample(&mut rng) + if male { 2.0 } else { -2.0 })
            .round()
            .clamp(5.0, 90.0);
        let gain = if rng.random_bool(0.92) {
            0.0
        } else {
            gain_dist.sample(&mut rng).round().min(99999.0)
        };
        // Relationship and occupation are strong sex proxies, as in the real
        // census data: Husband/Wife are sex-pure, and occupation mixes shift
        // by sex within each education band. A partially fit model picks up
        // group bias through these long before the sex flag itself trains.
        let relationship = if male {
            pick(&mut rng, &[("Husband", 0.61), ("Single", 0.29), ("Other", 0.10)])
        } else {
            pick(&mut rng, &[("Wife", 0.15), ("Single", 0.64), ("Other", 0.21)])
        };
        let workclass = if rng.random_bool(0.005) {
            "?"
        } else {
            pick(&mut rng, &[("Private", 0.70), ("SelfEmp", 0.12), ("Gov", 0.18)])
        };
        let occupation = match (male, edu) {
            (true, e) if e >= 13.0 => pick(
                &mut rng,
                &[
                    ("Professional", 0.55),
                    ("Clerical", 0.15),
                    ("Service", 0.08),
                    ("Manual", 0.22),
                ],
            ),
            (true, e) if e >= 10.0 => pick(
                &mut rng,
                &[
                    ("Professional", 0.25),
                    ("Clerical", 0.12),
                    ("Service", 0.18),
                    ("Manual", 0.45),
                ],
            ),
            (true, _) => pick(
                &mut rng,
                &[
                    ("Professional", 0.05),
                    ("Clerical", 0.08),
                    ("Service", 0.27),
                    ("Manual", 0.60),
                ],
            ),
            (false, e) if e >= 13.0 => pick(
                &mut rng,
                &[
                    ("Professional", 0.50),
                    ("Clerical", 0.32),
                    ("Service", 0.12),
                    ("Manual", 0.06),
                ],
            ),
            (false, e) if e >= 10.0 => pick(
                &mut rng,
                &[
                    ("Professional", 0.20),
                    ("Clerical", 0.42),
                    ("Service", 0.28),
                    ("Manual", 0.10),
                ],
            ),
            (false, _) => pick(
                &mut rng,
                &[
                    ("Professional", 0.04),
                    ("Clerical", 0.30),
                    ("Service", 0.51),
                    ("Manual", 0.15),
                ],
            ),
        };

        let married = relationship == "Husband" || relationship == "Wife";
        let professional = occupation == "Professional";
        let z = -2.9
            + 0.45 * (edu - 10.0) / 2.5
            + 0.35 * (age - 38.0) / 12.0
            + 0.30 * (hours - 40.0) / 10.0
            + 1.4 * f64::from(u8::from(gain > 0.0))
            + 0.9 * f64::from(u8::from(married))
            + 0.5 * f64::from(u8::from(professional))
            + 1.0 * f64::from(u8::from(male));
        let income = if rng.random_bool(sigmoid(z)) { ">50K" } else { "<=50K" };

        let _ = writeln!(
            csv,
            "{age},{edu},{hours},{gain},{relationship},{workclass},{occupation},{sex},{income}",
            sex = if male { "Male" } else { "Female" },
        );
    }
    csv
}

pub fn compas_synth_schema() -> Schema {
    let mut columns = BTreeMap::new();
    columns.insert("age".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("priors_count".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("juv_fel_count".to_string(), ColumnRole::FeatureContinuous);
    columns.insert("charge_degree".to_string(), ColumnRole::FeatureCategorical);
    columns.insert("sex".to_string(), ColumnRole::FeatureCategorical);
    columns.insert("race".to_string(), ColumnRole::Sensitive);
    columns.insert("no_recid".to_string(), ColumnRole::Label);
    Schema {
        columns,
        label_positive: "yes".to_string(),
        sensitive_positive: "Caucasian".to_string(),
        missing_markers: vec!["?".to_string()],
        sensitive_as_feature: true,
    }
}

/// Recidivism style data: binary race (Caucasian privileged, about 40% of
/// rows), favorable label is staying clean for two years.
pub fn compas_synth_csv(rows: usize, seed: u64) -> String {
    let mut rng = derive_rng(seed, "compas-synth", &[rows as u64]);
    let age_dist: Normal<f64> = Normal::new(32.0, 11.0).unwrap();

    let mut csv = String::with_capacity(rows * 48);
    csv.push_str("age,priors_count,juv_fel_count,charge_degree,sex,race,no_recid\n");
    for _ in 0..rows {
        let caucasian = rng.random_bool(0.40);
        let age = age_dist.sample(&mut rng).round().clamp(18.0, 70.0);
        let priors_mu = if caucasian { 0.6 } else { 1.0 };
        let priors = (LogNormal::<f64>::new(priors_mu, 0.9).unwrap().sample(&mut rng) - 1.0)
            .round()
            .clamp(0.0, 30.0);
        let juv = if rng.random_bool(0.90) {
            0.0
        } else {
            rng.random_range(1..=3) as f64
        };
        let felony = rng.random_bool(0.60);
        let male = rng.random_bool(0.80);

        let z = 0.35 - 0.55 * (priors / 4.0) - 0.30 * juv + 0.45 * (age - 32.0) / 11.0
            - 0.25 * f64::from(u8::from(felony))
            + 0.30 * f64::from(u8::from(caucasian));
        let clean = rng.random_bool(sigmoid(z));

        let _ = writeln!(
            csv,
            "{age},{priors},{juv},{degree},{sex},{race},{label}",
            degree = if felony { "F" } else { "M" },
            sex = if male { "Male" } else { "Female" },
            race = if caucasian { "Caucasian" } else { "African-American" },
            label = if clean { "yes" } else { "no" },
        );
    }
    csv
}
