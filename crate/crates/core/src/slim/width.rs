use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Active extent of a slimmed dimension: `round(max_extent * width)` with
/// halves rounded up, never below one.
pub fn ac(max_extent: usize, width: f64) -> usize {
    debug_assert!(width > 0.0 && width <= 1.0 && max_extent >= 1);
    ((max_extent as f64 * width + 0.5).floor() as usize).max(1)
}

/// Strictly descending width multipliers starting at 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WidthList(Vec<f64>);

impl WidthList {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("width list is empty".into()));
        }
        if widths[0] != 1.0 {
            return Err(Error::Config(format!(
                "width list must start with 1.0, got {}",
                widths[0]
            )));
        }
        for &w in &widths {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Config(format!("width {w} outside (0, 1]")));
            }
        }
        if widths.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Config(format!(
                "width list must be strictly descending, got {widths:?}"
            )));
        }
        Ok(WidthList(widths))
    }

    /// `[1, (n-1)/n, ..., 1/n]`
    pub fn evenly_spaced(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("width count must be >= 1".into()));
        }
        WidthList::new((0..n).map(|k| (n - k) as f64 / n as f64).collect())
    }

    pub fn full() -> Self {
        WidthList(vec![1.0])
    }

    pub fn widths(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }

    /// Position of `width`; exact membership only.
    pub fn index_of(&self, width: f64) -> Result<usize> {
        self.0.iter().position(|&w| w == width).ok_or_else(|| {
            Error::Config(format!("width {width} is not in the width list {self}"))
        })
    }

    pub fn contains(&self, width: f64) -> bool {
        self.0.contains(&width)
    }

    pub fn is_subset_of(&self, other: &WidthList) -> bool {
        self.0.iter().all(|w| other.contains(*w))
    }
}

impl TryFrom<Vec<f64>> for WidthList {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WidthList::new(v)
    }
}

impl From<WidthList> for Vec<f64> {
    fn from(w: WidthList) -> Self {
        w.0
    }
}

impl fmt::Display for WidthList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// The width a model currently executes at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlimContext {
    pub active_width: f64,
    pub width_index: usize,
}

impl SlimContext {
    pub fn new(widths: &WidthList, width: f64) -> Result<Self> {
        Ok(SlimContext {
            active_width: width,
            width_index: widths.index_of(width)?,
        })
    }

    pub fn full() -> Self {
        SlimContext {
            active_width: 1.0,
            width_index: 0,
        }
    }

    pub fn extent(&self, max_extent: usize) -> usize {
        ac(max_extent, self.active_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn active_extent_examples() {
        assert_eq!(ac(64, 0.75), 48);
        assert_eq!(ac(40, 0.25), 10);
        assert_eq!(ac(1, 0.25), 1);
        assert_eq!(ac(32, 1.0), 32);
        // half rounds up
        assert_eq!(ac(10, 0.25), 3);
    }

    #[test]
    fn width_list_rules() {
        assert!(WidthList::new(vec![1.0, 0.75, 0.5, 0.25]).is_ok());
        assert!(WidthList::new(vec![]).is_err());
        assert!(WidthList::new(vec![0.75, 0.5]).is_err());
        assert!(WidthList::new(vec![1.0, 0.5, 0.5]).is_err());
        assert!(WidthList::new(vec![1.0, 0.25, 0.5]).is_err());
        assert!(WidthList::new(vec![1.0, 0.0]).is_err());
        let wl = WidthList::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap();
        assert_eq!(wl.index_of(0.5).unwrap(), 2);
        assert!(matches!(wl.index_of(0.3), Err(Error::Config(_))));
    }

    #[test]
    fn evenly_spaced_lists() {
        assert_eq!(WidthList::evenly_spaced(1).unwrap().widths(), &[1.0]);
        assert_eq!(
            WidthList::evenly_spaced(4).unwrap().widths(),
            &[1.0, 0.75, 0.5, 0.25]
        );
        let forty = WidthList::evenly_spaced(40).unwrap();
        assert_eq!(forty.len(), 40);
        assert_eq!(*forty.widths().last().unwrap(), 1.0 / 40.0);
    }

    proptest! {
        #[test]
        fn ac_is_monotone_and_bounded(max in 1usize..512, a in 0.001f64..1.0, b in 0.001f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(ac(max, lo) <= ac(max, hi));
            prop_assert!(ac(max, hi) >= 1 && ac(max, hi) <= max);
            prop_assert_eq!(ac(max, 1.0), max);
        }
    }
}
