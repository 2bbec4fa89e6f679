//! Key-agreement arithmetic: blinding, leader responses, recovery of the leader's blinded
//! secret, the two key computations and the incremental leader batch.
//!
//! With member secrets `r_i` and leader secret `r_l`, the group key is
//! `g^{r_l} * prod_i (g^{r_i})^{r_l} = g^{r_l (1 + sum_i r_i)}`. A member only ever
//! exponentiates twice per key (its blinding and one recovery); the leader pays one
//! exponentiation per member plus one for `g^{r_l}`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group::{ExpCounter, GroupElement, GroupError, GroupParams, Scalar};

pub type NodeId = u32;

pub const NONCE_LEN: usize = 16;

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; NONCE_LEN];
        rng.fill(&mut bytes);
        Nonce(bytes)
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GkaError {
    #[error("secret scalar is zero")]
    ZeroScalar,
    /// The element is the identity or otherwise unusable as a contribution.
    #[error("element is not a usable subgroup member")]
    NotInSubgroup,
    #[error("participant {0} appears more than once")]
    DuplicateParticipant(NodeId),
    /// The exponent `r_l (1 + sum r_i)` vanished mod q. `culprit` is the most recently
    /// absorbed contribution; dropping it always restores a non-degenerate exponent.
    #[error("group key is the identity element")]
    DegenerateKey { culprit: Option<NodeId> },
}

impl From<GroupError> for GkaError {
    fn from(e: GroupError) -> Self {
        match e {
            GroupError::ZeroScalar => GkaError::ZeroScalar,
            _ => GkaError::NotInSubgroup,
        }
    }
}

/// A participant's public share: identity, nonce and blinded secret `g^{r_i}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub participant: NodeId,
    pub nonce: Nonce,
    pub blinded_secret: GroupElement,
}

/// The leader's reply to one contribution: `(g^{r_i})^{r_l}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedResponse {
    pub participant: NodeId,
    pub response: GroupElement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub group_key: GroupElement,
    pub epoch: u64,
    pub derived: [u8; 32],
}

impl SessionKey {
    pub fn new(group_key: GroupElement, epoch: u64, params: &GroupParams) -> Result<Self, GkaError> {
        let derived = derive_session_key(&group_key, epoch, params)?;
        Ok(Self {
            group_key,
            epoch,
            derived,
        })
    }
}

fn nonzero(s: &Scalar) -> Result<(), GkaError> {
    if s.is_zero() {
        Err(GkaError::ZeroScalar)
    } else {
        Ok(())
    }
}

/// `g^secret`.
pub fn blind(secret: &Scalar, params: &GroupParams, ctr: &mut ExpCounter) -> Result<GroupElement, GkaError> {
    nonzero(secret)?;
    Ok(params.exp(params.generator(), secret, ctr))
}

/// `blinded_secret^leader_secret`.
pub fn respond(
    blinded_secret: &GroupElement,
    leader_secret: &Scalar,
    params: &GroupParams,
    ctr: &mut ExpCounter,
) -> Result<GroupElement, GkaError> {
    if blinded_secret.is_identity() {
        return Err(GkaError::NotInSubgroup);
    }
    Ok(params.exp(blinded_secret, leader_secret, ctr))
}

/// Strips the member's own secret from its blinded response, yielding `g^{r_l}`.
pub fn recover_leader_blind(
    response: &GroupElement,
    own_secret: &Scalar,
    params: &GroupParams,
    ctr: &mut ExpCounter,
) -> Result<GroupElement, GkaError> {
    let inverse = params.scalar_inverse(own_secret)?;
    Ok(params.exp(response, &inverse, ctr))
}

fn check_distinct(ids: impl IntoIterator<Item = NodeId>) -> Result<(), GkaError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(GkaError::DuplicateParticipant(id));
        }
    }
    Ok(())
}

/// Member side: `g^{r_l}` times every blinded response. Multiplications only.
pub fn compute_key_member(
    leader_blind: &GroupElement,
    responses: &[BlindedResponse],
    params: &GroupParams,
) -> Result<GroupElement, GkaError> {
    check_distinct(responses.iter().map(|r| r.participant))?;
    let key = responses
        .iter()
        .fold(leader_blind.clone(), |acc, r| params.mul(&acc, &r.response));
    if key.is_identity() {
        return Err(GkaError::DegenerateKey { culprit: None });
    }
    Ok(key)
}

/// Leader side, all at once: one response per contribution plus `g^{r_l}`, i.e. `m`
/// exponentiations for a group of `m`. Responses come back ordered by participant id.
pub fn compute_key_leader(
    leader_secret: &Scalar,
    contributions: &[Contribution],
    params: &GroupParams,
    ctr: &mut ExpCounter,
) -> Result<(GroupElement, Vec<BlindedResponse>), GkaError> {
    nonzero(leader_secret)?;
    check_distinct(contributions.iter().map(|c| c.participant))?;
    let leader_blind = blind(leader_secret, params, ctr)?;
    let mut key = leader_blind;
    let mut responses = Vec::with_capacity(contributions.len());
    for c in contributions {
        let response = respond(&c.blinded_secret, leader_secret, params, ctr)?;
        key = params.mul(&key, &response);
        responses.push(BlindedResponse {
            participant: c.participant,
            response,
        });
    }
    if key.is_identity() {
        return Err(GkaError::DegenerateKey {
            culprit: contributions.last().map(|c| c.participant),
        });
    }
    responses.sort_by_key(|r| r.participant);
    Ok((key, responses))
}

/// SHA-256 over the fixed-width element encoding followed by the big-endian epoch.
pub fn derive_session_key(key: &GroupElement, epoch: u64, params: &GroupParams) -> Result<[u8; 32], GkaError> {
    if key.is_identity() {
        return Err(GkaError::DegenerateKey { culprit: None });
    }
    let mut h = Sha256::new();
    h.update(params.encode_element(key));
    h.update(epoch.to_be_bytes());
    Ok(h.finalize().into())
}

/// Incremental leader state: the leader secret is drawn and blinded up front, and each
/// contribution is answered as it arrives, so that emitting the group message needs no
/// further exponentiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaderBatch {
    leader_secret: Scalar,
    leader_blind: GroupElement,
    /// Absorption order; the last entry is the degenerate-key culprit.
    absorbed: Vec<(Contribution, GroupElement)>,
    running_product: GroupElement,
}

impl LeaderBatch {
    pub fn new(leader_secret: Scalar, params: &GroupParams, ctr: &mut ExpCounter) -> Result<Self, GkaError> {
        let leader_blind = blind(&leader_secret, params, ctr)?;
        Ok(Self {
            leader_secret,
            leader_blind,
            absorbed: Vec::new(),
            running_product: params.identity(),
        })
    }

    pub fn leader_secret(&self) -> &Scalar {
        &self.leader_secret
    }

    pub fn leader_blind(&self) -> &GroupElement {
        &self.leader_blind
    }

    /// Product of all absorbed responses.
    pub fn running_product(&self) -> &GroupElement {
        &self.running_product
    }

    pub fn len(&self) -> usize {
        self.absorbed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.absorbed.is_empty()
    }

    pub fn contribution(&self, id: NodeId) -> Option<&Contribution> {
        self.absorbed.iter().map(|(c, _)| c).find(|c| c.participant == id)
    }

    pub fn participants(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.absorbed.iter().map(|(c, _)| c.participant)
    }

    pub fn absorb(&mut self, c: Contribution, params: &GroupParams, ctr: &mut ExpCounter) -> Result<(), GkaError> {
        if self.contribution(c.participant).is_some() {
            return Err(GkaError::DuplicateParticipant(c.participant));
        }
        let response = respond(&c.blinded_secret, &self.leader_secret, params, ctr)?;
        self.running_product = params.mul(&self.running_product, &response);
        self.absorbed.push((c, response));
        Ok(())
    }

    /// Last-writer-wins absorb. An identical contribution is a no-op and costs nothing;
    /// returns whether a new response was computed.
    pub fn refresh(&mut self, c: Contribution, params: &GroupParams, ctr: &mut ExpCounter) -> Result<bool, GkaError> {
        if let Some(existing) = self.contribution(c.participant) {
            if existing == &c {
                return Ok(false);
            }
            self.remove(c.participant, params);
        }
        self.absorb(c, params, ctr)?;
        Ok(true)
    }

    pub fn remove(&mut self, id: NodeId, params: &GroupParams) -> bool {
        let before = self.absorbed.len();
        self.absorbed.retain(|(c, _)| c.participant != id);
        let removed = self.absorbed.len() != before;
        if removed {
            self.recompute(params);
        }
        removed
    }

    pub fn retain(&mut self, mut keep: impl FnMut(NodeId) -> bool, params: &GroupParams) {
        let before = self.absorbed.len();
        self.absorbed.retain(|(c, _)| keep(c.participant));
        if self.absorbed.len() != before {
            self.recompute(params);
        }
    }

    fn recompute(&mut self, params: &GroupParams) {
        self.running_product = self
            .absorbed
            .iter()
            .fold(params.identity(), |acc, (_, r)| params.mul(&acc, r));
    }

    /// One multiplication; no exponentiation. Responses are ordered by participant id.
    pub fn finalize(&self, params: &GroupParams) -> Result<(GroupElement, Vec<BlindedResponse>), GkaError> {
        let key = params.mul(&self.leader_blind, &self.running_product);
        if key.is_identity() {
            return Err(GkaError::DegenerateKey {
                culprit: self.absorbed.last().map(|(c, _)| c.participant),
            });
        }
        let mut responses: Vec<_> = self
            .absorbed
            .iter()
            .map(|(c, r)| BlindedResponse {
                participant: c.participant,
                response: r.clone(),
            })
            .collect();
        responses.sort_by_key(|r| r.participant);
        Ok((key, responses))
    }
}
