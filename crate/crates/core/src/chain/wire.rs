//! Chain wire format.
//!
//! ```text
//! magic    8 bytes  "CIOTACHN"
//! version  u32 LE   1
//! length   u64 LE   byte length of the body that follows
//! body     u64 LE block count, then each block, then the partial block
//!
//! block    meta, u64 LE record count, records
//! meta     prev_hash (32 bytes), app_id (str), app_version (str), block_index u64 LE
//! record   agent_id u32 LE, address (str), u64 LE model length, model bytes,
//!          u32 LE signature length, signature bytes
//! str      u32 LE length, UTF-8 bytes
//! ```
//!
//! Models use the canonical model encoding, so the whole chain encodes
//! deterministically.

use super::crypto::Signature;
use super::{AgentId, Block, BlockMeta, Chain, Digest, PartialBlock, Record};
use crate::emm::{decode_model, encode_model};
use crate::error::{Error, Result};

pub const CHAIN_MAGIC: &[u8; 8] = b"CIOTACHN";
pub const CHAIN_FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 20;

pub fn encode_chain(chain: &Chain) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(chain.blocks.len() as u64).to_le_bytes());
    for b in &chain.blocks {
        write_section(&mut body, &b.meta, &b.records);
    }
    write_section(&mut body, &chain.partial.meta, &chain.partial.records);

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(CHAIN_MAGIC);
    out.extend_from_slice(&CHAIN_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_chain(bytes: &[u8]) -> Result<Chain> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::decode(bytes.len(), "truncated chain header"));
    }
    if &bytes[..8] != CHAIN_MAGIC {
        return Err(Error::decode(0, "bad chain magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHAIN_FORMAT_VERSION {
        return Err(Error::decode(8, format!("unsupported chain version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if len != (bytes.len() - HEADER_LEN) as u64 {
        return Err(Error::decode(12, format!("body length {len} does not match input")));
    }

    let mut r = Reader { bytes, pos: HEADER_LEN };
    let n_blocks = r.u64()?;
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        let (meta, records) = r.section()?;
        blocks.push(Block { meta, records });
    }
    let (meta, records) = r.section()?;
    if r.pos != bytes.len() {
        return Err(Error::decode(r.pos, "trailing bytes after chain"));
    }
    Ok(Chain {
        blocks,
        partial: PartialBlock { meta, records },
    })
}

fn write_section(out: &mut Vec<u8>, meta: &BlockMeta, records: &[Record]) {
    meta.write_canonical(out);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        write_record(out, r);
    }
}

pub(crate) fn write_record(out: &mut Vec<u8>, r: &Record) {
    out.extend_from_slice(&r.agent_id.0.to_le_bytes());
    super::put_str(out, &r.address);
    let model = encode_model(&r.model);
    out.extend_from_slice(&(model.len() as u64).to_le_bytes());
    out.extend_from_slice(&model);
    out.extend_from_slice(&(r.signature.0.len() as u32).to_le_bytes());
    out.extend_from_slice(&r.signature.0);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::decode(self.pos, format!("need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::decode(at, format!("length {n} exceeds input")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::decode(at, "string is not UTF-8"))
    }

    fn meta(&mut self) -> Result<BlockMeta> {
        let prev_hash = Digest(self.take(32)?.try_into().unwrap());
        Ok(BlockMeta {
            prev_hash,
            app_id: self.string()?,
            app_version: self.string()?,
            block_index: self.u64()?,
        })
    }

    fn record(&mut self) -> Result<Record> {
        let agent_id = AgentId(self.u32()?);
        let address = self.string()?;
        let n = self.len_u64()?;
        let at = self.pos;
        let model = decode_model(self.take(n)?).map_err(|e| match e {
            Error::Decode { offset, reason } => Error::decode(at + offset, reason),
            other => other,
        })?;
        let n = self.u32()? as usize;
        let signature = Signature(self.take(n)?.to_vec());
        Ok(Record {
            agent_id,
            address,
            model,
            signature,
        })
    }

    fn section(&mut self) -> Result<(BlockMeta, Vec<Record>)> {
        let meta = self.meta()?;
        let n = self.len_u64()?;
        let records = (0..n).map(|_| self.record()).collect::<Result<_>>()?;
        Ok((meta, records))
    }
}

#[cfg(test)]
mod tests {
    use super::super::crypto::{KeyedHashSigner, SignatureProvider};
    use super::*;
    use crate::emm::FrequencyMatrix;

    fn sample() -> Chain {
        let mut chain = Chain::genesis("httpd", "2.4");
        for i in 0..3u32 {
            let kp = KeyedHashSigner.keypair_from_seed(i as u64);
            let model = FrequencyMatrix::from_entries([(0, 1, 2 + i as u64), (1, 0, 1)]);
            chain
                .partial
                .append_signed(AgentId(i), "peer", model, &kp.secret, &KeyedHashSigner)
                .unwrap();
            chain.close_if_full(2);
        }
        chain
    }

    #[test]
    fn round_trip() {
        let chain = sample();
        assert_eq!(chain.len(), 1);
        assert_eq!(chain.partial.len(), 1);
        assert_eq!(decode_chain(&encode_chain(&chain)).unwrap(), chain);
    }

    #[test]
    fn rejects_malformed() {
        let bytes = encode_chain(&sample());
        assert!(matches!(decode_chain(&bytes[..5]), Err(Error::Decode { offset: 5, .. })));

        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(decode_chain(&bad), Err(Error::Decode { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_chain(&bad), Err(Error::Decode { offset: 12, .. })));

        // truncate the body but fix up the declared length
        let mut bad = bytes[..bytes.len() - 3].to_vec();
        let len = (bad.len() - HEADER_LEN) as u64;
        bad[12..20].copy_from_slice(&len.to_le_bytes());
        assert!(matches!(decode_chain(&bad), Err(Error::Decode { .. })));
    }
}
