//! The model ledger: signed records, blocks of exactly `L` records, the
//! partial block agents collaborate on, and the rules for validating and
//! extending a chain.

pub mod crypto;
mod protocol;
mod wire;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::emm::{combine, encode_model, FrequencyMatrix};
use crate::error::{Error, Result};
use crypto::{Keyring, SecretKey, Signature, SignatureProvider};

pub use protocol::{
    decide, receive_chain, CandidateChecks, ChainCandidate, Decision, ProtocolParams, RateLimiter,
    ReceiveState, ReportReason,
};
pub use wire::{decode_chain, encode_chain, CHAIN_FORMAT_VERSION, CHAIN_MAGIC};

const RECORD_DOMAIN: &[u8] = b"ciota-record-v1";
const BLOCK_DOMAIN: &[u8] = b"ciota-block-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub prev_hash: Digest,
    pub app_id: String,
    pub app_version: String,
    /// 1-based position of the block in the chain.
    pub block_index: u64,
}

impl BlockMeta {
    pub fn genesis(app_id: impl Into<String>, app_version: impl Into<String>) -> Self {
        Self {
            prev_hash: Digest::ZERO,
            app_id: app_id.into(),
            app_version: app_version.into(),
            block_index: 1,
        }
    }

    /// Metadata for the block that follows one with this metadata and digest.
    pub fn successor(&self, digest: Digest) -> Self {
        Self {
            prev_hash: digest,
            app_id: self.app_id.clone(),
            app_version: self.app_version.clone(),
            block_index: self.block_index + 1,
        }
    }

    pub(crate) fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.prev_hash.0);
        put_str(out, &self.app_id);
        put_str(out, &self.app_version);
        out.extend_from_slice(&self.block_index.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub agent_id: AgentId,
    /// Opaque locator used to reach the agent directly.
    pub address: String,
    pub model: FrequencyMatrix,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub meta: BlockMeta,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialBlock {
    pub meta: BlockMeta,
    pub records: Vec<Record>,
}

/// Closed blocks followed by the partial block under construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub blocks: Vec<Block>,
    pub partial: PartialBlock,
}

/// Why a block, partial block or chain failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    Length { expected: usize, found: usize },
    DuplicateAgent(AgentId),
    UnknownSigner(AgentId),
    BadSignature(AgentId),
    Meta(String),
    Linkage { block_index: u64 },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::Length { expected, found } => {
                write!(f, "length: expected {expected} records, found {found}")
            }
            Fault::DuplicateAgent(a) => write!(f, "duplicate agent {a}"),
            Fault::UnknownSigner(a) => write!(f, "unknown signer {a}"),
            Fault::BadSignature(a) => write!(f, "bad signature from agent {a}"),
            Fault::Meta(m) => write!(f, "metadata: {m}"),
            Fault::Linkage { block_index } => write!(f, "hash linkage broken at block {block_index}"),
        }
    }
}

/// Everything needed to check signatures.
#[derive(Clone, Copy)]
pub struct Verifier<'a> {
    pub keyring: &'a Keyring,
    pub provider: &'a dyn SignatureProvider,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Folds one more model into the running digest of a block's models.
fn extend_model_prefix(prefix: &Digest, model: &FrequencyMatrix) -> Digest {
    let mut h = Sha256::new();
    h.update(prefix.0);
    h.update(encode_model(model));
    Digest(h.finalize().into())
}

/// The bytes a record's signature covers: block metadata (including the
/// block counter), the signer, its locator, and a digest of every model from
/// the first record up to and including the signer's own.
pub fn record_message(meta: &BlockMeta, agent: AgentId, address: &str, prefix: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(RECORD_DOMAIN);
    meta.write_canonical(&mut out);
    out.extend_from_slice(&agent.0.to_le_bytes());
    put_str(&mut out, address);
    out.extend_from_slice(&prefix.0);
    out
}

fn model_prefixes(records: &[Record]) -> Vec<Digest> {
    let mut acc = Digest::ZERO;
    records
        .iter()
        .map(|r| {
            acc = extend_model_prefix(&acc, &r.model);
            acc
        })
        .collect()
}

fn check_records(meta: &BlockMeta, records: &[Record], verifier: Verifier<'_>) -> Result<(), Fault> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.agent_id) {
            return Err(Fault::DuplicateAgent(r.agent_id));
        }
    }
    for (r, prefix) in records.iter().zip(model_prefixes(records)) {
        let pk = verifier
            .keyring
            .get(&r.agent_id)
            .ok_or(Fault::UnknownSigner(r.agent_id))?;
        let msg = record_message(meta, r.agent_id, &r.address, &prefix);
        if !verifier.provider.verify(pk, &msg, &r.signature) {
            return Err(Fault::BadSignature(r.agent_id));
        }
    }
    Ok(())
}

fn models_of(records: &[Record]) -> Vec<FrequencyMatrix> {
    records.iter().map(|r| r.model.clone()).collect()
}

impl Block {
    /// SHA-256 over the canonical encoding of the metadata and every record.
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        h.update(BLOCK_DOMAIN);
        let mut buf = Vec::new();
        self.meta.write_canonical(&mut buf);
        h.update(&buf);
        h.update((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.clear();
            wire::write_record(&mut buf, r);
            h.update(&buf);
        }
        Digest(h.finalize().into())
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.records.iter().map(|r| r.agent_id)
    }

    pub fn combined_model(&self, p_a: f64) -> Result<FrequencyMatrix> {
        combine(&models_of(&self.records), p_a)
    }

    pub fn validate(&self, block_size: usize, verifier: Verifier<'_>) -> Result<(), Fault> {
        if self.records.len() != block_size {
            return Err(Fault::Length {
                expected: block_size,
                found: self.records.len(),
            });
        }
        if self.meta.block_index == 0 {
            return Err(Fault::Meta("block index must start at 1".into()));
        }
        check_records(&self.meta, &self.records, verifier)
    }
}

impl PartialBlock {
    pub fn new(meta: BlockMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.records.iter().any(|r| r.agent_id == agent)
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.records.iter().map(|r| r.agent_id)
    }

    /// Record count as seen by `viewer`: its own record does not count.
    pub fn effective_length(&self, viewer: AgentId) -> usize {
        self.len() - usize::from(self.contains(viewer))
    }

    /// Running digest of all models currently in the block.
    pub fn model_prefix(&self) -> Digest {
        model_prefixes(&self.records).pop().unwrap_or(Digest::ZERO)
    }

    /// Appends a record for `agent`, signed over the metadata and all models
    /// up to and including `model`.
    pub fn append_signed(
        &mut self,
        agent: AgentId,
        address: &str,
        model: FrequencyMatrix,
        secret: &SecretKey,
        provider: &dyn SignatureProvider,
    ) -> Result<()> {
        if self.contains(agent) {
            return Err(Error::InvalidInput(format!(
                "agent {agent} already has a record in block {}",
                self.meta.block_index
            )));
        }
        let prefix = extend_model_prefix(&self.model_prefix(), &model);
        let signature = provider.sign(secret, &record_message(&self.meta, agent, address, &prefix))?;
        self.records.push(Record {
            agent_id: agent,
            address: address.to_owned(),
            model,
            signature,
        });
        Ok(())
    }

    pub fn combined_model(&self, p_a: f64) -> Result<FrequencyMatrix> {
        combine(&models_of(&self.records), p_a)
    }

    pub fn validate(&self, block_size: usize, verifier: Verifier<'_>) -> Result<(), Fault> {
        if self.records.len() >= block_size {
            return Err(Fault::Length {
                expected: block_size - 1,
                found: self.records.len(),
            });
        }
        check_records(&self.meta, &self.records, verifier)
    }
}

/// Effective partial-block length: records in `pb`, minus the viewer's own.
pub fn pb_effective_length(pb: &PartialBlock, viewer: AgentId) -> usize {
    pb.effective_length(viewer)
}

impl Chain {
    /// An empty chain: no blocks and an empty partial block with index 1.
    pub fn genesis(app_id: impl Into<String>, app_version: impl Into<String>) -> Self {
        Self {
            blocks: Vec::new(),
            partial: PartialBlock::new(BlockMeta::genesis(app_id, app_version)),
        }
    }

    /// Chain length is the number of closed blocks.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn last_block(&self) -> Option<&Block> {
        self.blocks.last()
    }

    /// Closes the partial block once it holds `block_size` records, starting
    /// a fresh one linked to it. Returns the newly closed block, if any.
    pub fn close_if_full(&mut self, block_size: usize) -> Option<&Block> {
        if self.partial.len() < block_size {
            return None;
        }
        let block = Block {
            meta: self.partial.meta.clone(),
            records: std::mem::take(&mut self.partial.records),
        };
        self.partial = PartialBlock::new(block.meta.successor(block.digest()));
        self.blocks.push(block);
        self.blocks.last()
    }

    /// Checks indices and hash links between consecutive blocks and the
    /// partial block, without touching signatures.
    pub fn check_linkage(&self) -> Result<(), Fault> {
        let mut prev = Digest::ZERO;
        let app = self.partial.meta.app_id.as_str();
        let metas = self.blocks.iter().map(|b| (&b.meta, Some(b))).chain(std::iter::once((&self.partial.meta, None)));
        for (i, (meta, block)) in metas.enumerate() {
            let index = i as u64 + 1;
            if meta.block_index != index {
                return Err(Fault::Meta(format!(
                    "expected block index {index}, found {}",
                    meta.block_index
                )));
            }
            if meta.app_id != app {
                return Err(Fault::Meta(format!("mixed app ids {:?} and {app:?}", meta.app_id)));
            }
            if meta.prev_hash != prev {
                return Err(Fault::Linkage { block_index: index });
            }
            if let Some(b) = block {
                prev = b.digest();
            }
        }
        Ok(())
    }

    /// Full validation: linkage, every closed block, and the partial block.
    pub fn validate(&self, block_size: usize, verifier: Verifier<'_>) -> Result<(), Fault> {
        self.check_linkage()?;
        for b in &self.blocks {
            b.validate(block_size, verifier)?;
        }
        self.partial.validate(block_size, verifier)
    }
}

/// Delay before the next share event for a chain of length `m`:
/// `(1 - 2^(-lambda*m)) * (t_max - t_min) + t_min`. Starts at `t_min` and
/// approaches `t_max` as the chain matures.
pub fn interval_schedule(m: u64, lambda: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if t_min > t_max {
        return Err(Error::InvalidParameter(format!(
            "t_min {t_min} exceeds t_max {t_max}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    Ok((1.0 - (-lambda * m as f64).exp2()) * (t_max - t_min) + t_min)
}

#[cfg(test)]
mod tests {
    use super::crypto::{KeyPair, KeyedHashSigner};
    use super::*;

    pub(crate) fn keys(n: u32) -> (Vec<KeyPair>, Keyring) {
        let kps: Vec<_> = (0..n).map(|i| KeyedHashSigner.keypair_from_seed(i as u64)).collect();
        let ring = kps.iter().enumerate().map(|(i, k)| (AgentId(i as u32), k.public.clone())).collect();
        (kps, ring)
    }

    fn model(seed: u64) -> FrequencyMatrix {
        FrequencyMatrix::from_entries([(0, 1, 1 + seed), (1, 0, 2), (1, 2, seed % 3 + 1)])
    }

    fn pb_with(n: u32, kps: &[KeyPair]) -> PartialBlock {
        let mut pb = PartialBlock::new(BlockMeta::genesis("app", "1.0"));
        for i in 0..n {
            pb.append_signed(AgentId(i), &format!("10.0.0.{i}"), model(i as u64), &kps[i as usize].secret, &KeyedHashSigner)
                .unwrap();
        }
        pb
    }

    #[test]
    fn effective_length_excludes_viewer() {
        let (kps, _) = keys(4);
        let pb = pb_with(3, &kps);
        assert_eq!(pb_effective_length(&pb, AgentId(0)), 2);
        assert_eq!(pb_effective_length(&pb, AgentId(3)), 3);
        let empty = PartialBlock::new(BlockMeta::genesis("app", "1.0"));
        assert_eq!(pb_effective_length(&empty, AgentId(9)), 0);
    }

    #[test]
    fn honest_block_validates() {
        let (kps, ring) = keys(3);
        let mut chain = Chain::genesis("app", "1.0");
        chain.partial = pb_with(3, &kps);
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        let block = chain.close_if_full(3).unwrap().clone();
        assert_eq!(block.validate(3, v), Ok(()));
        assert_eq!(chain.validate(3, v), Ok(()));
    }

    #[test]
    fn tampered_model_breaks_signature() {
        let (kps, ring) = keys(3);
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        let pb = pb_with(3, &kps);
        let mut block = Block { meta: pb.meta.clone(), records: pb.records };
        block.records[1].model.add_count(5, 5, 1);
        // record 1's own signature and every later record's prefix break; the
        // first failure reported is record 1
        assert_eq!(block.validate(3, v), Err(Fault::BadSignature(AgentId(1))));
    }

    #[test]
    fn short_block_fails_length() {
        let (kps, ring) = keys(3);
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        let pb = pb_with(2, &kps);
        let block = Block { meta: pb.meta.clone(), records: pb.records };
        assert_eq!(block.validate(3, v), Err(Fault::Length { expected: 3, found: 2 }));
    }

    #[test]
    fn unknown_signer_and_duplicates() {
        let (kps, mut ring) = keys(3);
        let pb = pb_with(2, &kps);
        ring.remove(&AgentId(1));
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        assert_eq!(pb.validate(3, v), Err(Fault::UnknownSigner(AgentId(1))));

        let mut dup = pb.clone();
        dup.records.push(pb.records[0].clone());
        assert_eq!(dup.validate(5, v), Err(Fault::DuplicateAgent(AgentId(0))));
        let mut again = pb;
        assert!(again
            .append_signed(AgentId(0), "x", model(0), &kps[0].secret, &KeyedHashSigner)
            .is_err());
    }

    #[test]
    fn record_replayed_at_other_index_fails() {
        let (kps, ring) = keys(2);
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        let mut pb = pb_with(2, &kps);
        assert_eq!(pb.validate(5, v), Ok(()));
        pb.meta.block_index = 2;
        assert_eq!(pb.validate(5, v), Err(Fault::BadSignature(AgentId(0))));
    }

    #[test]
    fn close_if_full_links_blocks() {
        let (kps, ring) = keys(3);
        let v = Verifier { keyring: &ring, provider: &KeyedHashSigner };
        let mut chain = Chain::genesis("app", "1.0");
        chain.partial = pb_with(2, &kps);
        assert!(chain.close_if_full(3).is_none());
        assert_eq!(chain.len(), 0);

        chain.partial.append_signed(AgentId(2), "c", model(2), &kps[2].secret, &KeyedHashSigner).unwrap();
        let digest = chain.close_if_full(3).unwrap().digest();
        assert_eq!(chain.len(), 1);
        assert!(chain.partial.is_empty());
        assert_eq!(chain.partial.meta.block_index, 2);

        // independent recomputation of the block hash from its parts
        let b = &chain.blocks[0];
        let mut bytes = BLOCK_DOMAIN.to_vec();
        b.meta.write_canonical(&mut bytes);
        bytes.extend_from_slice(&3u64.to_le_bytes());
        for r in &b.records {
            wire::write_record(&mut bytes, r);
        }
        let expected = Digest(Sha256::digest(&bytes).into());
        assert_eq!(digest, expected);
        assert_eq!(chain.partial.meta.prev_hash, expected);
        assert_eq!(chain.check_linkage(), Ok(()));
        assert_eq!(chain.validate(3, v), Ok(()));

        let mut broken = chain.clone();
        broken.blocks[0].records[0].address = "elsewhere".into();
        assert_eq!(broken.check_linkage(), Err(Fault::Linkage { block_index: 2 }));
    }

    #[test]
    fn schedule_values() {
        assert_eq!(interval_schedule(0, 0.5, 60.0, 120.0).unwrap(), 60.0);
        assert_eq!(interval_schedule(1, 1.0, 60.0, 120.0).unwrap(), 90.0);
        assert!((interval_schedule(200, 1.0, 60.0, 120.0).unwrap() - 120.0).abs() < 1e-9);
        assert!(interval_schedule(1, 1.0, 121.0, 120.0).is_err());
        assert!(interval_schedule(1, 0.0, 60.0, 120.0).is_err());
    }
}
