use std::fmt;
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use super::PakeError;

/// 2048-bit MODP group prime from RFC 3526 (group 14).
const MODP2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1",
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD",
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245",
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D",
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F",
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D",
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9",
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510",
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

const MILLER_RABIN_ROUNDS: usize = 20;

/// Identifier of a built-in parameter set, carried in the first protocol message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamsId {
    #[serde(rename = "modp2048")]
    Modp2048,
    /// p = 23, q = 11. Only for known-answer tests.
    #[serde(rename = "toy23")]
    Toy23,
}

impl ParamsId {
    pub const ALL: [ParamsId; 2] = [ParamsId::Modp2048, ParamsId::Toy23];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamsId::Modp2048 => "modp2048",
            ParamsId::Toy23 => "toy23",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.as_str() == name)
    }

    /// The validated parameters. The first call per set runs the primality checks.
    pub fn params(self) -> &'static GroupParams {
        static MODP2048: OnceLock<GroupParams> = OnceLock::new();
        static TOY23: OnceLock<GroupParams> = OnceLock::new();
        match self {
            ParamsId::Modp2048 => MODP2048.get_or_init(|| {
                let p = BigUint::parse_bytes(MODP2048_HEX.as_bytes(), 16).expect("valid hex");
                GroupParams::new(self, p).expect("RFC 3526 prime is a safe prime")
            }),
            ParamsId::Toy23 => TOY23.get_or_init(|| {
                GroupParams::new(self, BigUint::from(23u32)).expect("23 is a safe prime")
            }),
        }
    }

    /// Finds the built-in set whose elements encode to exactly `len` bytes.
    pub fn for_element_len(len: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.params().element_len() == len)
    }
}

impl fmt::Display for ParamsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A safe-prime group: p = 2q + 1 with p and q prime.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    id: ParamsId,
    prime_modulus: BigUint,
    subgroup_order: BigUint,
    bit_length: u64,
}

impl GroupParams {
    pub fn new(id: ParamsId, prime_modulus: BigUint) -> Result<Self, PakeError> {
        if prime_modulus < BigUint::from(5u32) || !is_probable_prime(&prime_modulus) {
            return Err(PakeError::InvalidParams("modulus is not prime"));
        }
        let subgroup_order: BigUint = (&prime_modulus - 1u32) >> 1;
        if !is_probable_prime(&subgroup_order) {
            return Err(PakeError::InvalidParams("(p - 1) / 2 is not prime"));
        }
        Ok(Self {
            id,
            bit_length: prime_modulus.bits(),
            prime_modulus,
            subgroup_order,
        })
    }

    pub fn id(&self) -> ParamsId {
        self.id
    }

    pub fn prime_modulus(&self) -> &BigUint {
        &self.prime_modulus
    }

    pub fn subgroup_order(&self) -> &BigUint {
        &self.subgroup_order
    }

    pub fn bit_length(&self) -> u64 {
        self.bit_length
    }

    /// Width in bytes of the fixed-length big-endian element encoding.
    pub fn element_len(&self) -> usize {
        self.bit_length.div_ceil(8) as usize
    }

    pub(crate) fn pow(&self, base: &BigUint, exponent: &BigUint) -> BigUint {
        base.modpow(exponent, &self.prime_modulus)
    }

    pub(crate) fn to_fixed_bytes(&self, value: &BigUint) -> Vec<u8> {
        let raw = value.to_bytes_be();
        let width = self.element_len();
        debug_assert!(raw.len() <= width);
        let mut out = vec![0u8; width - raw.len()];
        out.extend_from_slice(&raw);
        out
    }
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("id", &self.id)
            .field("bit_length", &self.bit_length)
            .finish_non_exhaustive()
    }
}

impl Serialize for GroupParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.id.serialize(serializer)
    }
}

/// An element of Z_p^* outside the degenerate set {0, 1, p - 1}.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupElement {
    value: BigUint,
    params: ParamsId,
}

impl GroupElement {
    pub fn new(value: BigUint, params: ParamsId) -> Result<Self, PakeError> {
        let p = params.params().prime_modulus();
        if value >= *p {
            return Err(PakeError::ElementOutOfRange);
        }
        if value.is_zero() || value.is_one() || value == p - 1u32 {
            return Err(PakeError::DegenerateElement);
        }
        Ok(Self { value, params })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn params_id(&self) -> ParamsId {
        self.params
    }

    /// Big-endian, left padded to the group's element width.
    pub fn to_fixed_bytes(&self) -> Vec<u8> {
        self.params.params().to_fixed_bytes(&self.value)
    }

    /// Inverse of [`Self::to_fixed_bytes`]; the length must match exactly.
    pub fn from_fixed_bytes(bytes: &[u8], params: ParamsId) -> Result<Self, PakeError> {
        if bytes.len() != params.params().element_len() {
            return Err(PakeError::ElementOutOfRange);
        }
        Self::new(BigUint::from_bytes_be(bytes), params)
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.to_fixed_bytes())
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({}:{:x})", self.params, self.value)
    }
}

#[derive(Serialize, Deserialize)]
struct ElementRepr {
    params_id: ParamsId,
    value: String,
}

impl Serialize for GroupElement {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ElementRepr {
            params_id: self.params,
            value: self.to_base64(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = ElementRepr::deserialize(deserializer)?;
        let bytes = BASE64.decode(repr.value.as_bytes()).map_err(D::Error::custom)?;
        GroupElement::from_fixed_bytes(&bytes, repr.params_id).map_err(D::Error::custom)
    }
}

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 2000;
        let mut sieve = vec![true; LIMIT];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..LIMIT {
            if sieve[i] {
                for j in (i * i..LIMIT).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        (0..LIMIT as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

/// Trial division followed by Miller-Rabin with the first small primes as bases.
pub(crate) fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &sp in small_primes() {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u32;
    let shift = n_minus_one.trailing_zeros().expect("n > 2");
    let odd = &n_minus_one >> shift;

    'witness: for &base in small_primes().iter().take(MILLER_RABIN_ROUNDS) {
        let mut x = BigUint::from(base).modpow(&odd, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..shift {
            x = (&x * &x).mod_floor(n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
