//! Prime-order subgroup arithmetic over the integers modulo `p`.
//!
//! Every protocol value lives in one of two domains: [`GroupElement`]s (members of the
//! order-`q` subgroup generated by `g`) and [`Scalar`]s (exponents reduced modulo `q`).
//! Exponentiation goes through [`GroupParams::exp`], which bumps an [`ExpCounter`] so that
//! protocol costs can be measured exactly.

use std::fmt;
use std::str::FromStr;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("scalar is zero")]
    ZeroScalar,
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("value is not in the prime-order subgroup")]
    NotInSubgroup,
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),
    #[error("malformed parameter file: {0}")]
    ParamSyntax(String),
}

/// An exponent modulo the group order `q`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scalar(BigUint);

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({})", self.0)
    }
}

/// A member of the order-`q` subgroup. Only [`GroupParams`] constructs these, so a value
/// of this type has passed the membership check (or was produced by closed arithmetic).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_one()
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", self.0)
    }
}

/// Number of exponentiations performed by one node.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExpCounter {
    count: u64,
}

impl ExpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// The cyclic group `<g>` of prime order `q` inside `(Z/pZ)*`.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    name: String,
    modulus: BigUint,
    order: BigUint,
    generator: GroupElement,
    element_width: usize,
    scalar_width: usize,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("name", &self.name)
            .field("modulus_bits", &self.modulus.bits())
            .field("order_bits", &self.order.bits())
            .finish()
    }
}

const MODP_1024_160_P: &str = "B10B8F96A080E01DDE92DE5EAE5D54EC52C99FBCFB06A3C69A6A9DCA52D23B61\
6073E28675A23D189838EF1E2EE652C013ECB4AEA906112324975C3CD49B83BF\
ACCBDD7D90C4BD7098488E9C219A73724EFFD6FAE5644738FAA31A4FF55BCCC0\
A151AF5F0DC8B4BD45BF37DF365C1A65E68CFDA76D4DA708DF1FB2BC2E4A4371";
const MODP_1024_160_G: &str = "A4D1CBD5C3FD34126765A442EFB99905F8104DD258AC507FD6406CFF14266D31\
266FEA1E5C41564B777E690F5504F213160217B4B01B886A5E91547F9E2749F4\
D7FBD7D3B9A92EE1909D0D2263F80A76A6A24C087A091F531DBF0A0169B6A28A\
D662A4D18E73AFA32D779D5918D08BC8858F4DCEF97C2A24855E6EEB22B3B2E5";
const MODP_1024_160_Q: &str = "F518AA8781A8DF278ABA4E7D64B7CB9D49462353";

fn parse_hex(s: &str) -> Option<BigUint> {
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    if s.is_empty() {
        return None;
    }
    BigUint::parse_bytes(s.as_bytes(), 16)
}

impl GroupParams {
    /// Builds a parameter set after checking that `p` and `q` are prime and that `g`
    /// generates a subgroup of order exactly `q`.
    pub fn new(
        name: impl Into<String>,
        modulus: BigUint,
        order: BigUint,
        generator: BigUint,
    ) -> Result<Self, GroupError> {
        let invalid = |why: &str| Err(GroupError::InvalidParams(why.to_string()));
        if order < BigUint::from(3u8) {
            return invalid("order must be at least 3");
        }
        if !is_probable_prime(&order) {
            return invalid("order is not prime");
        }
        if !is_probable_prime(&modulus) {
            return invalid("modulus is not prime");
        }
        if generator <= BigUint::one() || generator >= modulus {
            return invalid("generator out of range");
        }
        // q prime, g != 1 and g^q = 1 together pin the order of g to exactly q.
        if !generator.modpow(&order, &modulus).is_one() {
            return invalid("generator does not have order q");
        }
        let element_width = byte_len(&(&modulus - 1u8));
        let scalar_width = byte_len(&(&order - 1u8));
        Ok(Self {
            name: name.into(),
            modulus,
            order,
            generator: GroupElement(generator),
            element_width,
            scalar_width,
        })
    }

    /// p = 23, q = 11, g = 2. Small enough for exhaustive checks.
    pub fn toy() -> Self {
        Self::new("toy", BigUint::from(23u8), BigUint::from(11u8), BigUint::from(2u8))
            .expect("toy parameters are valid")
    }

    /// 1024-bit MODP group with a 160-bit prime-order subgroup (RFC 5114, section 2.1).
    pub fn modp_1024_160() -> Self {
        let parse = |s: &str| parse_hex(s).expect("built-in constant");
        Self::new(
            "modp1024-160",
            parse(MODP_1024_160_P),
            parse(MODP_1024_160_Q),
            parse(MODP_1024_160_G),
        )
        .expect("built-in parameters are valid")
    }

    /// Parses the text parameter format: one `key=value` per line with keys `p`, `q`,
    /// `g` (hex) and `name`. Blank lines and lines starting with `#` are ignored.
    pub fn from_param_text(text: &str) -> Result<Self, GroupError> {
        let (mut p, mut q, mut g, mut name) = (None, None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |why: &str| GroupError::ParamSyntax(format!("line {}: {why}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key=value"))?;
            let hex = || parse_hex(value).ok_or_else(|| syntax("invalid hex"));
            match key.trim() {
                "p" => p = Some(hex()?),
                "q" => q = Some(hex()?),
                "g" => g = Some(hex()?),
                "name" => name = Some(value.trim().to_string()),
                other => return Err(syntax(&format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| GroupError::ParamSyntax(format!("missing `{k}`"));
        Self::new(
            name.ok_or_else(|| missing("name"))?,
            p.ok_or_else(|| missing("p"))?,
            q.ok_or_else(|| missing("q"))?,
            g.ok_or_else(|| missing("g"))?,
        )
    }

    pub fn to_param_text(&self) -> String {
        format!(
            "p={:x}\nq={:x}\ng={:x}\nname={}\n",
            self.modulus, self.order, self.generator.0, self.name
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn order(&self) -> &BigUint {
        &self.order
    }

    pub fn generator(&self) -> &GroupElement {
        &self.generator
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement(BigUint::one())
    }

    /// Bytes in the fixed-width big-endian encoding of an element.
    pub fn element_width(&self) -> usize {
        self.element_width
    }

    /// Bytes in the fixed-width big-endian encoding of a scalar.
    pub fn scalar_width(&self) -> usize {
        self.scalar_width
    }

    pub fn is_member(&self, value: &BigUint) -> bool {
        !value.is_zero() && value < &self.modulus && value.modpow(&self.order, &self.modulus).is_one()
    }

    /// Lifts an integer into the subgroup, rejecting non-members.
    pub fn element(&self, value: BigUint) -> Result<GroupElement, GroupError> {
        if self.is_member(&value) {
            Ok(GroupElement(value))
        } else {
            Err(GroupError::NotInSubgroup)
        }
    }

    /// Reduces an integer modulo `q`.
    pub fn scalar(&self, value: impl Into<BigUint>) -> Scalar {
        Scalar(value.into() % &self.order)
    }

    /// Uniform draw from `[1, q-1]`.
    pub fn random_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> Scalar {
        Scalar(rng.gen_biguint_range(&BigUint::one(), &self.order))
    }

    pub fn exp(&self, base: &GroupElement, s: &Scalar, counter: &mut ExpCounter) -> GroupElement {
        counter.count += 1;
        GroupElement(base.0.modpow(&s.0, &self.modulus))
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement((&a.0 * &b.0) % &self.modulus)
    }

    pub fn scalar_inverse(&self, s: &Scalar) -> Result<Scalar, GroupError> {
        s.0.modinv(&self.order).map(Scalar).ok_or(GroupError::ZeroScalar)
    }

    pub fn scalar_add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &b.0) % &self.order)
    }

    pub fn scalar_mul(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 * &b.0) % &self.order)
    }

    pub fn encode_element(&self, e: &GroupElement) -> Vec<u8> {
        left_pad(&e.0, self.element_width)
    }

    pub fn decode_element(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        if bytes.len() != self.element_width {
            return Err(GroupError::BadLength {
                expected: self.element_width,
                actual: bytes.len(),
            });
        }
        self.element(BigUint::from_bytes_be(bytes))
    }

    pub fn encode_scalar(&self, s: &Scalar) -> Vec<u8> {
        left_pad(&s.0, self.scalar_width)
    }
}

impl FromStr for GroupParams {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_param_text(s)
    }
}

fn byte_len(v: &BigUint) -> usize {
    (v.bits() as usize).div_ceil(8).max(1)
}

fn left_pad(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let mut out = vec![0u8; width.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

const SMALL_PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Miller-Rabin with the first 24 primes as witnesses. Deterministic for n < 3.3e24 and
/// overwhelmingly reliable above that for non-adversarial inputs.
pub(crate) fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u8);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - 1u8;
    let shift = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> shift;
    'witness: for &a in &SMALL_PRIMES {
        let mut x = BigUint::from(a).modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..shift {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
