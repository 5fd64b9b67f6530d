use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of severity grades.
pub const NUM_GRADES: usize = 5;

const NAMES: [&str; NUM_GRADES] = ["No DR", "Mild DR", "Moderate DR", "Severe DR", "Proliferative DR"];

/// Diabetic retinopathy severity grade, 0 (no DR) through 4 (proliferative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct GradeLabel(u8);

impl GradeLabel {
    pub const ALL: [GradeLabel; NUM_GRADES] = [
        GradeLabel(0),
        GradeLabel(1),
        GradeLabel(2),
        GradeLabel(3),
        GradeLabel(4),
    ];

    pub fn new(value: i64) -> Result<Self> {
        if (0..NUM_GRADES as i64).contains(&value) {
            Ok(GradeLabel(value as u8))
        } else {
            Err(Error::InvalidGrade(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        NAMES.iter().position(|n| *n == name).map(|i| GradeLabel(i as u8))
    }
}

impl TryFrom<i64> for GradeLabel {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        GradeLabel::new(value)
    }
}

impl From<GradeLabel> for u8 {
    fn from(g: GradeLabel) -> u8 {
        g.0
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.0, self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_grade_order() {
        let names: Vec<_> = GradeLabel::ALL.iter().map(|g| g.name()).collect();
        assert_eq!(
            names,
            ["No DR", "Mild DR", "Moderate DR", "Severe DR", "Proliferative DR"]
        );
        for g in GradeLabel::ALL {
            assert_eq!(GradeLabel::from_name(g.name()), Some(g));
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(GradeLabel::new(-1).is_err());
        assert!(GradeLabel::new(5).is_err());
        assert!(GradeLabel::new(7).is_err());
        assert_eq!(GradeLabel::new(4).unwrap().value(), 4);
    }

    #[test]
    fn serde_uses_plain_integer() {
        let g = GradeLabel::new(3).unwrap();
        assert_eq!(serde_json::to_string(&g).unwrap(), "3");
        assert_eq!(serde_json::from_str::<GradeLabel>("3").unwrap(), g);
        assert!(serde_json::from_str::<GradeLabel>("9").is_err());
    }
}
