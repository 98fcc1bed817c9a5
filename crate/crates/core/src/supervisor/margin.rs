pub const MARGIN_MIN: f64 = 0.3;
pub const MARGIN_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginSource {
    Default,
    Hmi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginState {
    pub requested: f64,
    pub effective: f64,
    pub source: MarginSource,
}

impl Default for MarginState {
    fn default() -> Self {
        MarginState {
            requested: MARGIN_MAX,
            effective: MARGIN_MAX,
            source: MarginSource::Default,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("margin request {0} is not finite")]
pub struct NonFiniteMargin(pub f64);

pub fn set_margin(request: f64, source: MarginSource) -> Result<MarginState, NonFiniteMargin> {
    if !request.is_finite() {
        return Err(NonFiniteMargin(request));
    }
    Ok(MarginState {
        requested: request,
        effective: request.clamp(MARGIN_MIN, MARGIN_MAX),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(set_margin(0.7, MarginSource::Hmi).unwrap().effective, 0.7);
        assert_eq!(set_margin(1.5, MarginSource::Hmi).unwrap().effective, 1.0);
        assert_eq!(set_margin(0.1, MarginSource::Hmi).unwrap().effective, 0.3);
        assert!(set_margin(f64::NAN, MarginSource::Hmi).is_err());
        assert!(set_margin(f64::INFINITY, MarginSource::Hmi).is_err());
    }

    proptest! {
        #[test]
        fn effective_in_range(r in -1e6f64..1e6) {
            let m = set_margin(r, MarginSource::Hmi).unwrap();
            prop_assert!((MARGIN_MIN..=MARGIN_MAX).contains(&m.effective));
            prop_assert_eq!(m.requested, r);
        }
    }
}
