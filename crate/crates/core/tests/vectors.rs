//! Fixed wire encodings. Set `CIOTA_BLESS=1` to rewrite the files after an
//! intentional format change.

use std::path::PathBuf;

use ciota::chain::crypto::{KeyedHashSigner, SignatureProvider};
use ciota::chain::{decode_chain, encode_chain, AgentId, Chain};
use ciota::emm::FrequencyMatrix;

fn check(name: &str, chain: &Chain) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/vectors").join(name);
    let bytes = encode_chain(chain);
    if std::env::var_os("CIOTA_BLESS").is_some() {
        std::fs::write(&path, hex::encode(&bytes) + "\n").unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let stored = hex::decode(text.trim()).unwrap();
    assert_eq!(hex::encode(&bytes), hex::encode(&stored), "{name}");
    assert_eq!(&decode_chain(&stored).unwrap(), chain);
}

fn two_record_partial() -> Chain {
    let signer = KeyedHashSigner;
    let mut chain = Chain::genesis("vector-app", "1.0.0");
    for (i, entries) in [[(0, 1, 3), (1, 0, 2)], [(0, 1, 1), (1, 2, 4)]].into_iter().enumerate() {
        let kp = signer.keypair_from_seed(i as u64);
        chain
            .partial
            .append_signed(AgentId(i as u32), &format!("peer-{i}"), FrequencyMatrix::from_entries(entries), &kp.secret, &signer)
            .unwrap();
    }
    chain
}

#[test]
fn genesis_chain() {
    check("genesis_chain.hex", &Chain::genesis("vector-app", "1.0.0"));
}

#[test]
fn partial_block_with_two_records() {
    check("partial_two_records.hex", &two_record_partial());
}

#[test]
fn closed_two_record_block_digest() {
    let mut chain = two_record_partial();
    let digest = chain.close_if_full(2).unwrap().digest().to_hex();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/vectors/block_two_records.digest");
    if std::env::var_os("CIOTA_BLESS").is_some() {
        std::fs::write(&path, format!("{digest}\n")).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), digest);
}
