use std::fmt;
use std::str::FromStr;

use rand::Rng;
use zeroize::{Zeroize, ZeroizeOnDrop};

use super::PakeError;

pub const PIN_LENGTH: usize = 5;

/// Five-digit secret mailed to the customer out of band.
///
/// `Debug` never prints the digits and the type deliberately has no `Serialize`
/// impl; callers that must persist it go through [`Pin::expose`].
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct Pin([u8; PIN_LENGTH]);

impl Pin {
    /// Number of distinct PINs.
    pub const SPACE: u32 = 100_000;

    pub fn parse(text: &str) -> Result<Self, PakeError> {
        let bytes = text.as_bytes();
        if bytes.len() != PIN_LENGTH || !bytes.iter().all(u8::is_ascii_digit) {
            return Err(PakeError::InvalidPin);
        }
        let mut digits = [0u8; PIN_LENGTH];
        digits.copy_from_slice(bytes);
        Ok(Self(digits))
    }

    /// PIN whose decimal value is `index`, zero padded. Panics if `index >= SPACE`.
    pub fn from_index(index: u32) -> Self {
        assert!(index < Self::SPACE, "PIN index out of range");
        let mut digits = [0u8; PIN_LENGTH];
        let mut rest = index;
        for slot in digits.iter_mut().rev() {
            *slot = b'0' + (rest % 10) as u8;
            rest /= 10;
        }
        Self(digits)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_index(rng.gen_range(0..Self::SPACE))
    }

    pub fn index(&self) -> u32 {
        self.0.iter().fold(0, |acc, d| acc * 10 + u32::from(d - b'0'))
    }

    /// The raw digits. Only the bank store and the simulated mail/screen paths use this.
    pub fn expose(&self) -> &str {
        std::str::from_utf8(&self.0).expect("digits are ASCII")
    }

    pub(crate) fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Pin(*****)")
    }
}

impl FromStr for Pin {
    type Err = PakeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
