//! Protocol messages, their canonical byte layout and authentication.
//!
//! Canonical layout (big-endian):
//!
//! ```text
//! [kind:1][sender_id:4][sender_nonce:16][epoch:8][entry_count:2][entry...]
//! entry: [id:4][nonce:16][has_response:1][blinded_secret:W][blinded_response:W if has_response]
//! ```
//!
//! `W` is the element width of the parameter set. A signed message on the wire is the
//! canonical bytes followed by `[sig_len:2][signature]`; the signature covers exactly the
//! canonical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gka::{Contribution, NodeId, Nonce, NONCE_LEN};
use crate::group::{GroupElement, GroupError, GroupParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Init = 0x01,
    IReply = 0x02,
    IGroup = 0x03,
    Join = 0x04,
    JReply = 0x05,
    JGroup = 0x06,
    Del = 0x07,
    DGroup = 0x08,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Init,
        MessageKind::IReply,
        MessageKind::IGroup,
        MessageKind::Join,
        MessageKind::JReply,
        MessageKind::JGroup,
        MessageKind::Del,
        MessageKind::DGroup,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(usize::from(tag).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Init => "INIT",
            MessageKind::IReply => "IREPLY",
            MessageKind::IGroup => "IGROUP",
            MessageKind::Join => "JOIN",
            MessageKind::JReply => "JREPLY",
            MessageKind::JGroup => "JGROUP",
            MessageKind::Del => "DEL",
            MessageKind::DGroup => "DGROUP",
        }
    }

    /// Kinds a leader broadcasts to announce the group. INIT is an IGROUP with no entries.
    pub fn is_group_announcement(self) -> bool {
        matches!(
            self,
            MessageKind::Init | MessageKind::IGroup | MessageKind::JGroup | MessageKind::DGroup
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `{U_i, N_i, g^{r_i}, g^{r_i r_l}}`; the response is absent in requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupEntry {
    pub participant: NodeId,
    pub nonce: Nonce,
    pub blinded_secret: GroupElement,
    pub blinded_response: Option<GroupElement>,
}

impl GroupEntry {
    pub fn request(c: &Contribution) -> Self {
        Self {
            participant: c.participant,
            nonce: c.nonce,
            blinded_secret: c.blinded_secret.clone(),
            blinded_response: None,
        }
    }

    pub fn contribution(&self) -> Contribution {
        Contribution {
            participant: self.participant,
            nonce: self.nonce,
            blinded_secret: self.blinded_secret.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub sender_nonce: Nonce,
    pub epoch: u64,
    pub entries: Vec<GroupEntry>,
    pub signature: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{path}: {reason}")]
pub struct ShapeViolation {
    pub path: String,
    pub reason: &'static str,
}

impl ShapeViolation {
    fn new(path: impl Into<String>, reason: &'static str) -> Self {
        Self {
            path: path.into(),
            reason,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("invalid response flag 0x{0:02x}")]
    BadFlag(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("too many entries ({0})")]
    TooManyEntries(usize),
    #[error("{field}: {source}")]
    Element { field: String, source: GroupError },
    #[error("shape violation: {0}")]
    Shape(#[from] ShapeViolation),
    #[error("no key for participant {0}")]
    UnknownParticipant(NodeId),
}

const HEADER_LEN: usize = 1 + 4 + NONCE_LEN + 8 + 2;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MessageError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(MessageError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MessageError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MessageError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, MessageError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MessageError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn nonce(&mut self) -> Result<Nonce, MessageError> {
        Ok(Nonce(self.take(NONCE_LEN)?.try_into().unwrap()))
    }
}

/// A signed message split into its authenticated part and signature, without validating
/// any group element. Used to check authenticity cheaply.
#[derive(Debug, Clone, Copy)]
pub struct SignedParts<'a> {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub canonical: &'a [u8],
    pub signature: &'a [u8],
}

impl<'a> SignedParts<'a> {
    pub fn split(bytes: &'a [u8], params: &GroupParams) -> Result<Self, MessageError> {
        let width = params.element_width();
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.u8()?;
        let kind = MessageKind::from_tag(tag).ok_or(MessageError::UnknownKind(tag))?;
        let sender = r.u32()?;
        r.take(NONCE_LEN + 8)?;
        let count = r.u16()?;
        for _ in 0..count {
            r.take(4 + NONCE_LEN)?;
            let flag = r.u8()?;
            match flag {
                0 => r.take(width)?,
                1 => r.take(2 * width)?,
                other => return Err(MessageError::BadFlag(other)),
            };
        }
        let canonical_len = r.pos;
        let sig_len = usize::from(r.u16()?);
        let signature = r.take(sig_len)?;
        if r.pos != bytes.len() {
            return Err(MessageError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            kind,
            sender,
            canonical: &bytes[..canonical_len],
            signature,
        })
    }
}

impl Message {
    pub fn encode_canonical(&self, params: &GroupParams) -> Vec<u8> {
        let width = params.element_width();
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.len() * (21 + 2 * width));
        out.push(self.kind.tag());
        out.extend_from_slice(&self.sender.to_be_bytes());
        out.extend_from_slice(&self.sender_nonce.0);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        let count = u16::try_from(self.entries.len()).expect("entry count checked by builders");
        out.extend_from_slice(&count.to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.participant.to_be_bytes());
            out.extend_from_slice(&e.nonce.0);
            out.push(u8::from(e.blinded_response.is_some()));
            out.extend_from_slice(&params.encode_element(&e.blinded_secret));
            if let Some(r) = &e.blinded_response {
                out.extend_from_slice(&params.encode_element(r));
            }
        }
        out
    }

    /// Canonical bytes followed by the length-prefixed signature.
    pub fn encode(&self, params: &GroupParams) -> Vec<u8> {
        let mut out = self.encode_canonical(params);
        let sig_len = u16::try_from(self.signature.len()).expect("signature fits in u16");
        out.extend_from_slice(&sig_len.to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    /// Parses a signed wire message. Every element is checked for subgroup membership;
    /// per-kind shape rules are left to [`Message::validate_shape`].
    pub fn decode(bytes: &[u8], params: &GroupParams) -> Result<Self, MessageError> {
        let width = params.element_width();
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.u8()?;
        let kind = MessageKind::from_tag(tag).ok_or(MessageError::UnknownKind(tag))?;
        let sender = r.u32()?;
        let sender_nonce = r.nonce()?;
        let epoch = r.u64()?;
        let count = r.u16()?;
        let mut entries = Vec::with_capacity(usize::from(count).min(1024));
        for i in 0..count {
            let participant = r.u32()?;
            let nonce = r.nonce()?;
            let flag = r.u8()?;
            if flag > 1 {
                return Err(MessageError::BadFlag(flag));
            }
            let element = |r: &mut Reader, what: &str| -> Result<GroupElement, MessageError> {
                params
                    .decode_element(r.take(width)?)
                    .map_err(|source| MessageError::Element {
                        field: format!("entries[{i}].{what}"),
                        source,
                    })
            };
            let blinded_secret = element(&mut r, "blinded_secret")?;
            let blinded_response = if flag == 1 {
                Some(element(&mut r, "blinded_response")?)
            } else {
                None
            };
            entries.push(GroupEntry {
                participant,
                nonce,
                blinded_secret,
                blinded_response,
            });
        }
        let sig_len = usize::from(r.u16()?);
        let signature = r.take(sig_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(MessageError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            kind,
            sender,
            sender_nonce,
            epoch,
            entries,
            signature,
        })
    }

    /// Per-kind grammar:
    /// - INIT, DEL: no entries.
    /// - IREPLY, JOIN: exactly one request entry for the sender itself; a JOIN entry also
    ///   carries the sender nonce.
    /// - JREPLY: request entries only, distinct ids.
    /// - IGROUP, JGROUP, DGROUP: every entry carries a response, ids are distinct and the
    ///   sender (the leader) is not listed.
    pub fn validate_shape(&self) -> Result<(), ShapeViolation> {
        use MessageKind::*;
        let n = self.entries.len();
        match self.kind {
            Init | Del if n != 0 => return Err(ShapeViolation::new("entries", "must be empty")),
            IReply | Join => {
                if n != 1 {
                    return Err(ShapeViolation::new("entries", "expected exactly one entry"));
                }
                let e = &self.entries[0];
                if e.participant != self.sender {
                    return Err(ShapeViolation::new("entries[0].id", "must equal sender_id"));
                }
                if self.kind == Join && e.nonce != self.sender_nonce {
                    return Err(ShapeViolation::new("entries[0].nonce", "must equal sender_nonce"));
                }
            }
            _ => {}
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let wants_response = matches!(self.kind, IGroup | JGroup | DGroup);
            match (&e.blinded_response, wants_response) {
                (None, true) => return Err(ShapeViolation::new(format!("entries[{i}].blinded_response"), "missing")),
                (Some(_), false) => {
                    return Err(ShapeViolation::new(
                        format!("entries[{i}].blinded_response"),
                        "not allowed for this kind",
                    ))
                }
                _ => {}
            }
            if e.blinded_secret.is_identity() {
                return Err(ShapeViolation::new(
                    format!("entries[{i}].blinded_secret"),
                    "identity element",
                ));
            }
            if !seen.insert(e.participant) {
                return Err(ShapeViolation::new(format!("entries[{i}].id"), "duplicate participant"));
            }
            if wants_response && e.participant == self.sender {
                return Err(ShapeViolation::new(
                    format!("entries[{i}].id"),
                    "leader listed as member",
                ));
            }
        }
        Ok(())
    }

    /// Short digest used to name a message in logs.
    pub fn digest(&self, params: &GroupParams) -> [u8; 8] {
        let d = Sha256::digest(self.encode(params));
        d[..8].try_into().unwrap()
    }

    pub fn entry(&self, id: NodeId) -> Option<&GroupEntry> {
        self.entries.iter().find(|e| e.participant == id)
    }
}

/// Long-term authentication behind the sign/verify contract.
pub trait SignatureScheme: Send + Sync {
    fn sign(&self, signer: NodeId, data: &[u8]) -> Result<Vec<u8>, MessageError>;
    fn verify(&self, claimed: NodeId, data: &[u8], signature: &[u8]) -> bool;
}

type HmacSha256 = Hmac<Sha256>;

/// Test-profile signature scheme: HMAC-SHA256 under a per-participant key. Every holder of
/// the ring can verify (and, being symmetric, forge), which is fine for protocol testing.
#[derive(Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<NodeId, [u8; 32]>,
}

impl fmt::Debug for KeyRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRing")
            .field("participants", &self.keys.len())
            .finish()
    }
}

impl KeyRing {
    /// Derives one key per id from `seed`.
    pub fn provision(ids: impl IntoIterator<Item = NodeId>, seed: u64) -> Self {
        let keys = ids
            .into_iter()
            .map(|id| {
                let mut h = Sha256::new();
                h.update(b"agdh-keyring");
                h.update(seed.to_be_bytes());
                h.update(id.to_be_bytes());
                (id, h.finalize().into())
            })
            .collect();
        Self { keys }
    }

    pub fn insert(&mut self, id: NodeId, key: [u8; 32]) {
        self.keys.insert(id, key);
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.keys.contains_key(&id)
    }

    pub fn participants(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.keys.keys().copied()
    }
}

impl SignatureScheme for KeyRing {
    fn sign(&self, signer: NodeId, data: &[u8]) -> Result<Vec<u8>, MessageError> {
        let key = self.keys.get(&signer).ok_or(MessageError::UnknownParticipant(signer))?;
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(data);
        Ok(mac.finalize().into_bytes().to_vec())
    }

    fn verify(&self, claimed: NodeId, data: &[u8], signature: &[u8]) -> bool {
        let Some(key) = self.keys.get(&claimed) else {
            return false;
        };
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(data);
        mac.verify_slice(signature).is_ok()
    }
}

pub fn sign(mut msg: Message, scheme: &dyn SignatureScheme, params: &GroupParams) -> Result<Message, MessageError> {
    msg.signature = scheme.sign(msg.sender, &msg.encode_canonical(params))?;
    Ok(msg)
}

pub fn verify(msg: &Message, scheme: &dyn SignatureScheme, params: &GroupParams) -> bool {
    scheme.verify(msg.sender, &msg.encode_canonical(params), &msg.signature)
}

/// Authenticity check straight from wire bytes.
pub fn verify_bytes(bytes: &[u8], scheme: &dyn SignatureScheme, params: &GroupParams) -> bool {
    SignedParts::split(bytes, params)
        .map(|p| scheme.verify(p.sender, p.canonical, p.signature))
        .unwrap_or(false)
}

fn unsigned(
    kind: MessageKind,
    sender: NodeId,
    sender_nonce: Nonce,
    epoch: u64,
    entries: Vec<GroupEntry>,
) -> Result<Message, ShapeViolation> {
    if entries.len() > usize::from(u16::MAX) {
        return Err(ShapeViolation::new("entries", "more than 65535 entries"));
    }
    let msg = Message {
        kind,
        sender,
        sender_nonce,
        epoch,
        entries,
        signature: Vec::new(),
    };
    msg.validate_shape()?;
    Ok(msg)
}

pub fn build_init(leader: NodeId, leader_nonce: Nonce, epoch: u64) -> Message {
    unsigned(MessageKind::Init, leader, leader_nonce, epoch, Vec::new()).expect("INIT shape is fixed")
}

/// IGROUP, JGROUP or DGROUP: the leader's announcement with responses.
pub fn build_group(
    kind: MessageKind,
    leader: NodeId,
    leader_nonce: Nonce,
    epoch: u64,
    entries: Vec<GroupEntry>,
) -> Result<Message, ShapeViolation> {
    if !matches!(kind, MessageKind::IGroup | MessageKind::JGroup | MessageKind::DGroup) {
        return Err(ShapeViolation::new("kind", "not a group announcement with responses"));
    }
    unsigned(kind, leader, leader_nonce, epoch, entries)
}

pub fn build_igroup(
    leader: NodeId,
    leader_nonce: Nonce,
    epoch: u64,
    entries: Vec<GroupEntry>,
) -> Result<Message, ShapeViolation> {
    build_group(MessageKind::IGroup, leader, leader_nonce, epoch, entries)
}

/// The sender nonce of an IREPLY echoes the leader's nonce; the member's own nonce
/// travels in its entry.
pub fn build_ireply(contribution: &Contribution, leader_nonce: Nonce, epoch: u64) -> Message {
    unsigned(
        MessageKind::IReply,
        contribution.participant,
        leader_nonce,
        epoch,
        vec![GroupEntry::request(contribution)],
    )
    .expect("IREPLY shape is fixed")
}

pub fn build_join(contribution: &Contribution, epoch: u64) -> Message {
    unsigned(
        MessageKind::Join,
        contribution.participant,
        contribution.nonce,
        epoch,
        vec![GroupEntry::request(contribution)],
    )
    .expect("JOIN shape is fixed")
}

pub fn build_jreply(
    sender: NodeId,
    sender_nonce: Nonce,
    epoch: u64,
    contributions: &[Contribution],
) -> Result<Message, ShapeViolation> {
    let entries = contributions.iter().map(GroupEntry::request).collect();
    unsigned(MessageKind::JReply, sender, sender_nonce, epoch, entries)
}

pub fn build_del(member: NodeId, member_nonce: Nonce, epoch: u64) -> Message {
    unsigned(MessageKind::Del, member, member_nonce, epoch, Vec::new()).expect("DEL shape is fixed")
}
