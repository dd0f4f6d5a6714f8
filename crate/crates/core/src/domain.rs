//! Core identity types shared by the whole simulator: phone numbers, caller
//! lines (number + name + CIV flag), challenges and verification outcomes.
//!
//! Everything here is an immutable value type; no global state, no hidden
//! randomness. Challenge generation takes the caller's RNG so that every
//! simulation run is reproducible from its seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Character appended to a caller name to signal CIV support.
pub const CIV_FLAG_CHAR: char = '*';

/// Longest caller name the networks will carry, flag character included.
pub const MAX_NAME_LEN: usize = 15;

/// Longest phone number we accept.
pub const MAX_NUMBER_LEN: usize = 15;

/// Numbers of this length or shorter cannot be dialed and are used as the
/// CLI carrier for challenges.
pub const NONDIALABLE_MAX_LEN: usize = 4;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum DomainError {
    #[error("invalid phone number {0:?}: digits 0-9 only, length 1-15")]
    InvalidNumber(String),
    #[error("caller name too long ({0} chars, limit {MAX_NAME_LEN})")]
    NameTooLong(usize),
    #[error("invalid challenge length {0}: must be 1-15 digits")]
    InvalidLength(usize),
}

/// Whether a number is an ordinary dialable number or a short non-dialable
/// one (the challenge carrier).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumberKind {
    Standard,
    NondialableShort,
}

/// A telephone number as presented on the wire: a string of decimal digits.
/// Leading zeros are significant, so this is never an integer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhoneNumber {
    digits: String,
    kind: NumberKind,
}

impl PhoneNumber {
    pub fn new(digits: &str) -> Result<Self, DomainError> {
        if digits.is_empty()
            || digits.len() > MAX_NUMBER_LEN
            || !digits.chars().all(|c| c.is_ascii_digit())
        {
            return Err(DomainError::InvalidNumber(digits.to_string()));
        }
        let kind = if digits.len() <= NONDIALABLE_MAX_LEN {
            NumberKind::NondialableShort
        } else {
            NumberKind::Standard
        };
        Ok(Self {
            digits: digits.to_string(),
            kind,
        })
    }

    pub fn digits(&self) -> &str {
        &self.digits
    }

    pub fn kind(&self) -> NumberKind {
        self.kind
    }

    pub fn is_nondialable_short(&self) -> bool {
        self.kind == NumberKind::NondialableShort
    }
}

impl std::fmt::Display for PhoneNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.digits)
    }
}

/// The identity pair a call presents: number, name, and whether the name
/// carries the CIV support flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallerLine {
    pub number: PhoneNumber,
    pub name: String,
    pub civ_flag: bool,
}

impl CallerLine {
    /// Builds a line from raw wire fields. The flag character is retained in
    /// the stored name; display policy is left to the receiving phone.
    pub fn parse(raw_number: &str, raw_name: &str) -> Result<Self, DomainError> {
        let number = PhoneNumber::new(raw_number)?;
        if raw_name.chars().count() > MAX_NAME_LEN {
            return Err(DomainError::NameTooLong(raw_name.chars().count()));
        }
        let civ_flag = raw_name.ends_with(CIV_FLAG_CHAR);
        Ok(Self {
            number,
            name: raw_name.to_string(),
            civ_flag,
        })
    }
}

/// Convenience free-function form of [`CallerLine::parse`].
pub fn parse_caller_line(raw_number: &str, raw_name: &str) -> Result<CallerLine, DomainError> {
    CallerLine::parse(raw_number, raw_name)
}

/// An n-digit secret sent to the displayed number and echoed back. Stored as
/// a digit string so that leading zeros survive CLI transport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    digits: String,
}

impl Challenge {
    pub fn digits(&self) -> &str {
        &self.digits
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// Reinterprets received digits as a challenge, e.g. the CLI of a
    /// recognized verification call.
    pub fn from_digits(digits: &str) -> Result<Self, DomainError> {
        if digits.is_empty() || digits.len() > MAX_NUMBER_LEN {
            return Err(DomainError::InvalidLength(digits.len()));
        }
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(DomainError::InvalidNumber(digits.to_string()));
        }
        Ok(Self {
            digits: digits.to_string(),
        })
    }
}

/// Draws an n-digit challenge, each digit uniform over 0-9. Leading zeros
/// are legal and significant.
pub fn generate_challenge<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Challenge, DomainError> {
    if n == 0 || n > MAX_NUMBER_LEN {
        return Err(DomainError::InvalidLength(n));
    }
    let digits: String = (0..n)
        .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
        .collect();
    Ok(Challenge { digits })
}

/// Outcome of one verification attempt as shown next to the caller ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationStatus {
    Verified,
    NotVerified,
    /// The initial call carried no CIV flag, so no verification ran.
    NotAttempted,
}

/// Exact-equality check of a response against the challenge: same length,
/// same digits. Anything malformed is simply not a match.
pub fn verify_response(challenge: &Challenge, response: &str) -> VerificationStatus {
    if challenge.digits == response {
        VerificationStatus::Verified
    } else {
        VerificationStatus::NotVerified
    }
}
