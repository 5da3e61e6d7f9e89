//! Case split bookkeeping: subset, uncertainty category and interpolation /
//! extrapolation region per case.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    Training,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintyCategory {
    Low,
    High,
}

/// Whether a case's Reynolds number falls inside the span of the training
/// cases. Training cases are interpolation by definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Interpolation,
    Extrapolation,
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Training => "Training",
            Subset::Test => "Test",
        })
    }
}

impl std::str::FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Training" => Ok(Subset::Training),
            "Test" => Ok(Subset::Test),
            other => Err(format!("unknown subset {other:?}")),
        }
    }
}

impl std::fmt::Display for UncertaintyCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UncertaintyCategory::Low => "Low",
            UncertaintyCategory::High => "High",
        })
    }
}

impl std::str::FromStr for UncertaintyCategory {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Low" => Ok(UncertaintyCategory::Low),
            "High" => Ok(UncertaintyCategory::High),
            other => Err(format!("unknown uncertainty category {other:?}")),
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Interpolation => "Interpolation",
            Region::Extrapolation => "Extrapolation",
        })
    }
}

/// Everything known about one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseInfo {
    pub re: f64,
    pub subset: Subset,
    pub category: UncertaintyCategory,
    pub region: Region,
}

/// Case id -> case info. Every case appears exactly once (map keyed by id);
/// regions are derived from the training Reynolds span at construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseSplit {
    cases: BTreeMap<u32, CaseInfo>,
}

impl CaseSplit {
    /// Build from (case id, Re, subset, category) rows. Duplicate case ids
    /// with conflicting rows are rejected; regions are derived.
    pub fn from_assignments(rows: &[(u32, f64, Subset, UncertaintyCategory)]) -> Result<Self> {
        let mut seen: BTreeMap<u32, (f64, Subset, UncertaintyCategory)> = BTreeMap::new();
        for (id, re, subset, category) in rows {
            if let Some(prev) = seen.get(id) {
                if prev != &(*re, *subset, *category) {
                    return Err(CoreError::data(format!(
                        "case {id} has conflicting split assignments"
                    )));
                }
            } else {
                seen.insert(*id, (*re, *subset, *category));
            }
        }
        let train_res: Vec<f64> = seen
            .values()
            .filter(|(_, s, _)| *s == Subset::Training)
            .map(|(re, _, _)| *re)
            .collect();
        let span = if train_res.is_empty() {
            None
        } else {
            Some((
                train_res.iter().cloned().fold(f64::INFINITY, f64::min),
                train_res.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ))
        };
        let cases = seen
            .into_iter()
            .map(|(id, (re, subset, category))| {
                let region = match (subset, span) {
                    (Subset::Training, _) => Region::Interpolation,
                    (Subset::Test, Some((lo, hi))) if re >= lo && re <= hi => Region::Interpolation,
                    _ => Region::Extrapolation,
                };
                (
                    id,
                    CaseInfo {
                        re,
                        subset,
                        category,
                        region,
                    },
                )
            })
            .collect();
        Ok(Self { cases })
    }

    /// The eleven-case reference configuration: Re from 0.5e6 to 10.5e6 in
    /// 1e6 steps, cases 0-4 low uncertainty and 5-10 high, training cases
    /// {1, 3, 5, 6, 8}.
    pub fn reference_eleven_case() -> Self {
        let training = [1u32, 3, 5, 6, 8];
        let rows: Vec<(u32, f64, Subset, UncertaintyCategory)> = (0..11u32)
            .map(|id| {
                let re = 0.5e6 + id as f64 * 1.0e6;
                let subset = if training.contains(&id) {
                    Subset::Training
                } else {
                    Subset::Test
                };
                let category = if id <= 4 {
                    UncertaintyCategory::Low
                } else {
                    UncertaintyCategory::High
                };
                (id, re, subset, category)
            })
            .collect();
        Self::from_assignments(&rows).expect("reference split is well-formed")
    }

    pub fn get(&self, case_id: u32) -> Option<&CaseInfo> {
        self.cases.get(&case_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &CaseInfo)> {
        self.cases.iter()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn case_ids(&self) -> Vec<u32> {
        self.cases.keys().cloned().collect()
    }
}
