use core::fmt;

/// How slot reuse is protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SafetyMode {
    /// Senders reuse a slot as soon as the request FIFO allows it. Overwrites
    /// of unconsumed data are detected through iteration stamps, not prevented.
    Faithful,
    /// A sender blocks before reusing a slot until every peer has acknowledged
    /// consuming the iteration that previously lived there.
    Acked,
}

impl SafetyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SafetyMode::Faithful => "faithful",
            SafetyMode::Acked => "acked",
        }
    }
}

impl core::str::FromStr for SafetyMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "faithful" => Ok(SafetyMode::Faithful),
            "acked" => Ok(SafetyMode::Acked),
            _ => Err(ConfigError::UnknownSafetyMode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    ZeroSlots,
    ZeroSegment,
    UnknownSafetyMode,
    /// The outstanding-request guard needs `bound_k + 1` live slots.
    TooFewSlots { bound_k: usize, slot_count: usize },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ZeroSlots => f.write_str("slot_count must be at least 1"),
            ConfigError::ZeroSegment => f.write_str("per_peer_bytes must be positive"),
            ConfigError::UnknownSafetyMode => f.write_str("safety mode must be `faithful` or `acked`"),
            ConfigError::TooFewSlots { bound_k, slot_count } => write!(
                f,
                "bound {bound_k} keeps up to {} requests in flight but only {slot_count} slots are configured",
                bound_k + 1
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlsConfig {
    pub bound_k: usize,
    pub slot_count: usize,
    pub safety_mode: SafetyMode,
    pub per_peer_bytes: usize,
}

impl BlsConfig {
    /// Configuration with the default slot count for `safety_mode`.
    ///
    /// Faithful mode gets `bound_k + 1` slots, the fewest that admit `bound_k + 1`
    /// requests in flight. Acked mode gets `2 * bound_k + 2`: a peer consumes
    /// iteration `i` no later than its body `i + bound_k`, and the wait chain only
    /// proves it reached body `j - bound_k - 1`, so with fewer slots the acks
    /// would throttle the lag below `bound_k`.
    pub fn new(bound_k: usize, safety_mode: SafetyMode, per_peer_bytes: usize) -> Self {
        let slot_count = match safety_mode {
            SafetyMode::Faithful => bound_k + 1,
            SafetyMode::Acked => 2 * bound_k + 2,
        };
        BlsConfig {
            bound_k,
            slot_count,
            safety_mode,
            per_peer_bytes,
        }
    }

    pub fn with_slot_count(mut self, slot_count: usize) -> Self {
        self.slot_count = slot_count;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.slot_count == 0 {
            return Err(ConfigError::ZeroSlots);
        }
        if self.per_peer_bytes == 0 {
            return Err(ConfigError::ZeroSegment);
        }
        Ok(())
    }

    /// Stricter check used by the bounded-lag forward loop.
    pub fn validate_for_guard(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if self.slot_count <= self.bound_k {
            return Err(ConfigError::TooFewSlots {
                bound_k: self.bound_k,
                slot_count: self.slot_count,
            });
        }
        Ok(())
    }
}

/// Extra bytes per process needed to run with bound `k`:
/// `k * (s*b*tables + s^2 + b)` with all unit constants set to one.
pub fn compute_bls_overhead(k: u64, emb_bytes: u64, batch_size: u64, tables: u64) -> u64 {
    k * (emb_bytes * batch_size * tables + emb_bytes * emb_bytes + batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overhead_values() {
        assert_eq!(compute_bls_overhead(1, 64, 512, 26), 856_576);
        assert_eq!(compute_bls_overhead(3, 64, 512, 26), 2_569_728);
        assert_eq!(compute_bls_overhead(0, 64, 512, 26), 0);
        assert_eq!(compute_bls_overhead(0, 1, 1, 1), 0);
    }

    #[test]
    fn default_slot_counts() {
        assert_eq!(BlsConfig::new(0, SafetyMode::Faithful, 64).slot_count, 1);
        assert_eq!(BlsConfig::new(3, SafetyMode::Faithful, 64).slot_count, 4);
        assert_eq!(BlsConfig::new(0, SafetyMode::Acked, 64).slot_count, 2);
        assert_eq!(BlsConfig::new(2, SafetyMode::Acked, 64).slot_count, 6);
    }

    #[test]
    fn validation() {
        let c = BlsConfig::new(2, SafetyMode::Acked, 64).with_slot_count(3);
        assert!(c.validate().is_ok());
        assert!(c.validate_for_guard().is_ok());
        let c = BlsConfig::new(3, SafetyMode::Faithful, 64).with_slot_count(3);
        assert!(c.validate().is_ok());
        assert_eq!(
            c.validate_for_guard(),
            Err(ConfigError::TooFewSlots { bound_k: 3, slot_count: 3 })
        );
        assert_eq!(c.with_slot_count(0).validate(), Err(ConfigError::ZeroSlots));
        assert_eq!(BlsConfig::new(1, SafetyMode::Acked, 0).validate(), Err(ConfigError::ZeroSegment));
        assert_eq!("acked".parse(), Ok(SafetyMode::Acked));
        assert!("lax".parse::<SafetyMode>().is_err());
    }
}
