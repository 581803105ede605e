//! Build a block of signed records, close it, ship it over the wire and
//! catch tampering.

use ciota::chain::crypto::{Ed25519Signer, Keyring, SignatureProvider};
use ciota::chain::{decode_chain, encode_chain, AgentId, Chain, Verifier};
use ciota::emm::FrequencyMatrix;

fn main() -> ciota::Result<()> {
    let signer = Ed25519Signer;
    let block_size = 4;
    let keys: Vec<_> = (0..block_size as u64).map(|i| signer.keypair_from_seed(i)).collect();
    let keyring: Keyring = keys.iter().enumerate().map(|(i, k)| (AgentId(i as u32), k.public.clone())).collect();
    let verifier = Verifier {
        keyring: &keyring,
        provider: &signer,
    };

    let mut chain = Chain::genesis("thermostat", "2.1");
    for (i, k) in keys.iter().enumerate() {
        let model = FrequencyMatrix::from_entries([(0, 1, 10 + i as u64), (1, 0, 7)]);
        chain.partial.append_signed(AgentId(i as u32), &format!("10.0.0.{i}"), model, &k.secret, &signer)?;
    }
    let block = chain.close_if_full(block_size).expect("block is full").clone();
    println!("closed block 1 with {} records, digest {}", block.records.len(), block.digest().to_hex());
    println!("combined model: {:?}", block.combined_model(0.25)?.entries().collect::<Vec<_>>());

    let bytes = encode_chain(&chain);
    let decoded = decode_chain(&bytes)?;
    println!("wire size {} bytes, round trip equal: {}", bytes.len(), decoded == chain);
    println!("validates: {:?}", decoded.validate(block_size, verifier));

    let mut forged = decoded;
    forged.blocks[0].records[2].model.add_count(1, 1, 1_000);
    for (what, result) in [
        ("tampered chain", forged.validate(block_size, verifier)),
        ("tampered block", forged.blocks[0].validate(block_size, verifier)),
    ] {
        match result {
            Ok(()) => println!("{what} accepted"),
            Err(fault) => println!("{what} rejected: {fault}"),
        }
    }
    Ok(())
}
