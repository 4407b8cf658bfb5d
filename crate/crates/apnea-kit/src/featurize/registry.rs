//! The deterministic feature registry. Canonical feature-name strings are
//! part of the model contract: a trained model records them, and prediction
//! refuses matrices whose columns differ from the recorded list.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Lookback anchor offsets inside the 90 s window, seconds from window start.
pub const POSITIONS_S: [u32; 12] = [10, 20, 30, 40, 45, 50, 55, 60, 65, 70, 80, 90];
/// Short-window widths for standard deviation and ventilation.
pub const STD_VENT_WIDTHS_S: [u32; 3] = [8, 10, 12];
/// Widths for sample entropy and fractal dimension.
pub const ENTROPY_WIDTHS_S: [u32; 4] = [10, 30, 45, 60];
/// Long-reference lookbacks (5 and 10 minutes), measured from the window end.
pub const REF_WIDTHS_S: [u32; 2] = [300, 600];
/// Second inside the window that a row's prediction refers to.
pub const LABEL_ANCHOR_S: u32 = 60;
/// Window length in seconds.
pub const WINDOW_S: u32 = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Std,
    Ventilation,
    SampleEntropy,
    KatzFd,
    LongRefStd,
    LongRefVent,
    Spo2Drop,
    Spo2DropRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    Raw,
    Smoothed,
}

/// One column of the feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub family: FeatureFamily,
    /// Offset of the lookback end from the window start; absent for the
    /// long-reference and SpO2 families, which anchor elsewhere.
    pub position_s: Option<u32>,
    pub width_s: u32,
    /// Raw vs smoothed respiration; entropy/fractal families only.
    pub source: Option<SignalSource>,
}

impl FeatureSpec {
    /// Canonical column name, e.g. `std_pos10_w8`, `sampen_pos30_w10_smoothed`,
    /// `refvent_w600`, `spo2drop_w45`.
    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn parse_name(name: &str) -> Result<FeatureSpec> {
        let bad = || Error::DimensionMismatch(format!("unparseable feature name '{name}'"));
        let (family, rest) = name.split_once('_').ok_or_else(bad)?;
        let (family, rest) = match family {
            "spo2drop" if rest.starts_with("robust") => (
                FeatureFamily::Spo2DropRobust,
                rest.split_once('_').ok_or_else(bad)?.1,
            ),
            "spo2drop" => (FeatureFamily::Spo2Drop, rest),
            "std" => (FeatureFamily::Std, rest),
            "vent" => (FeatureFamily::Ventilation, rest),
            "sampen" => (FeatureFamily::SampleEntropy, rest),
            "katzfd" => (FeatureFamily::KatzFd, rest),
            "refstd" => (FeatureFamily::LongRefStd, rest),
            "refvent" => (FeatureFamily::LongRefVent, rest),
            _ => return Err(bad()),
        };
        let mut position_s = None;
        let mut width_s = None;
        let mut source = None;
        for part in rest.split('_') {
            if let Some(p) = part.strip_prefix("pos") {
                position_s = Some(p.parse::<u32>().map_err(|_| bad())?);
            } else if let Some(w) = part.strip_prefix('w') {
                width_s = Some(w.parse::<u32>().map_err(|_| bad())?);
            } else if part == "raw" {
                source = Some(SignalSource::Raw);
            } else if part == "smoothed" {
                source = Some(SignalSource::Smoothed);
            } else {
                return Err(bad());
            }
        }
        let spec = FeatureSpec {
            family,
            position_s,
            width_s: width_s.ok_or_else(bad)?,
            source,
        };
        if spec.name() != name {
            return Err(bad());
        }
        Ok(spec)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            FeatureFamily::Std => "std",
            FeatureFamily::Ventilation => "vent",
            FeatureFamily::SampleEntropy => "sampen",
            FeatureFamily::KatzFd => "katzfd",
            FeatureFamily::LongRefStd => "refstd",
            FeatureFamily::LongRefVent => "refvent",
            FeatureFamily::Spo2Drop => "spo2drop",
            FeatureFamily::Spo2DropRobust => "spo2drop_robust",
        };
        write!(f, "{fam}")?;
        if let Some(p) = self.position_s {
            write!(f, "_pos{p}")?;
        }
        write!(f, "_w{}", self.width_s)?;
        match self.source {
            Some(SignalSource::Raw) => write!(f, "_raw"),
            Some(SignalSource::Smoothed) => write!(f, "_smoothed"),
            None => Ok(()),
        }
    }
}

/// Enumerates the full ordered registry. In-window families keep only
/// combinations with `width <= position` so lookbacks stay inside the
/// window. `include_spo2` appends the desaturation feature; `robust` picks
/// the lag-tolerant variant.
pub fn build_registry(include_spo2: bool, robust: bool) -> Vec<FeatureSpec> {
    let mut registry = Vec::new();
    for family in [FeatureFamily::Std, FeatureFamily::Ventilation] {
        for &position in &POSITIONS_S {
            for &width in &STD_VENT_WIDTHS_S {
                if width <= position {
                    registry.push(FeatureSpec {
                        family,
                        position_s: Some(position),
                        width_s: width,
                        source: None,
                    });
                }
            }
        }
    }
    for family in [FeatureFamily::LongRefStd, FeatureFamily::LongRefVent] {
        for &width in &REF_WIDTHS_S {
            registry.push(FeatureSpec {
                family,
                position_s: None,
                width_s: width,
                source: None,
            });
        }
    }
    for family in [FeatureFamily::SampleEntropy, FeatureFamily::KatzFd] {
        for source in [SignalSource::Raw, SignalSource::Smoothed] {
            for &position in &POSITIONS_S {
                for &width in &ENTROPY_WIDTHS_S {
                    if width <= position {
                        registry.push(FeatureSpec {
                            family,
                            position_s: Some(position),
                            width_s: width,
                            source: Some(source),
                        });
                    }
                }
            }
        }
    }
    if include_spo2 {
        registry.push(spo2_spec(robust));
    }
    registry
}

pub fn spo2_spec(robust: bool) -> FeatureSpec {
    FeatureSpec {
        family: if robust {
            FeatureFamily::Spo2DropRobust
        } else {
            FeatureFamily::Spo2Drop
        },
        position_s: None,
        width_s: crate::featurize::SPO2_HORIZON_S as u32,
        source: None,
    }
}

pub fn registry_names(registry: &[FeatureSpec]) -> Vec<String> {
    registry.iter().map(|s| s.name()).collect()
}

/// FNV-1a over the joined names; recorded in manifests so runs can detect a
/// registry change.
pub fn registry_hash(names: &[String]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for name in names {
        for byte in name.as_bytes().iter().chain(b"\n") {
            h ^= *byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent combinatorial count: filter raw (family, width, position,
    /// source) tuples by the enumeration rule.
    fn oracle_count(include_spo2: bool) -> usize {
        let mut count = 0;
        for &p in &POSITIONS_S {
            for &w in &STD_VENT_WIDTHS_S {
                if w <= p {
                    count += 2; // std + vent
                }
            }
            for &w in &ENTROPY_WIDTHS_S {
                if w <= p {
                    count += 4; // {sampen, katz} x {raw, smoothed}
                }
            }
        }
        count += REF_WIDTHS_S.len() * 2;
        if include_spo2 {
            count += 1;
        }
        count
    }

    #[test]
    fn registry_is_deterministic() {
        assert_eq!(build_registry(true, false), build_registry(true, false));
        assert_eq!(
            registry_hash(&registry_names(&build_registry(false, false))),
            registry_hash(&registry_names(&build_registry(false, false)))
        );
    }

    #[test]
    fn registry_respects_width_leq_position() {
        for spec in build_registry(true, true) {
            if let Some(p) = spec.position_s {
                assert!(spec.width_s <= p, "{spec}");
            }
        }
    }

    #[test]
    fn registry_count_matches_combinatorial_oracle() {
        assert_eq!(build_registry(false, false).len(), oracle_count(false));
        assert_eq!(build_registry(true, false).len(), oracle_count(true));
        assert_eq!(build_registry(true, true).len(), oracle_count(true));
        // The enumeration rule lands on 214 respiration features.
        assert_eq!(build_registry(false, false).len(), 214);
        assert_eq!(build_registry(true, false).len(), 215);
    }

    #[test]
    fn names_roundtrip() {
        for spec in build_registry(true, false)
            .into_iter()
            .chain(build_registry(true, true))
        {
            let name = spec.name();
            let parsed = FeatureSpec::parse_name(&name).unwrap();
            assert_eq!(parsed, spec, "{name}");
        }
        assert!(FeatureSpec::parse_name("bogus_pos10_w8").is_err());
        assert!(FeatureSpec::parse_name("std_pos10").is_err());
    }

    #[test]
    fn unique_names() {
        let names = registry_names(&build_registry(true, true));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
