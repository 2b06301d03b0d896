//! Wire-protocol fuzz driver: random and mutated datagrams through the
//! decoder, and shuffled, duplicated, stale-laced chunk streams through
//! the reassembler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::wire::{
    chunk_samples, decode_message, encode_message, encode_packet, ChunkAddress, ConfigMessage, FeedOutcome, Message,
    Reassembler, TimingReport,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub datagrams: u64,
    pub decoded: u64,
    pub rejected: u64,
    /// Valid messages whose re-encoding did not round-trip.
    pub roundtrip_failures: u64,
    pub reassembly_trials: u64,
    pub reassembly_failures: u64,
}

impl FuzzReport {
    pub fn ok(&self) -> bool {
        self.roundtrip_failures == 0 && self.reassembly_failures == 0
    }
}

fn valid_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.gen_range(0..4) {
        0 => {
            let n = rng.gen_range(1..64);
            let samples: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let total = rng.gen_range(1..20);
            let p = chunk_samples(ChunkAddress::Context, rng.gen_range(0..1000), &samples, 64).expect("chunks");
            let mut p = p.into_iter().next().expect("one chunk");
            p.header = crate::wire::ChunkHeader::new(p.header.step_id(), rng.gen_range(0..total), total).expect("header");
            Message::Chunk(p)
        }
        1 => Message::Config(ConfigMessage {
            step_frames: rng.gen_range(1..64),
            latent_frames: 64,
            lookahead_w: rng.gen_range(-1..2),
            fade_samples: rng.gen_range(0..2000),
            packet_size: rng.gen_range(1..8000),
            stem: rng.gen_range(0..4),
        }),
        2 => Message::Reset,
        _ => Message::Timings(TimingReport {
            step_id: rng.gen_range(0..=i32::MAX as u32),
            forward_passes: rng.gen_range(0..100),
            ingest_ms: rng.gen_range(0.0..100.0),
            encode_ms: rng.gen_range(0.0..100.0),
            sampling_ms: rng.gen_range(0.0..2000.0),
            decode_ms: rng.gen_range(0.0..100.0),
            send_ms: rng.gen_range(0.0..100.0),
        }),
    }
}

fn mutate(bytes: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
    match rng.gen_range(0..4) {
        0 if !bytes.is_empty() => {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] ^= 1 << rng.gen_range(0..8);
        }
        1 => {
            let keep = rng.gen_range(0..=bytes.len());
            bytes.truncate(keep);
        }
        2 => {
            let extra = rng.gen_range(1..9);
            bytes.extend((0..extra).map(|_| rng.gen::<u8>()));
        }
        _ if !bytes.is_empty() => {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] = rng.gen();
        }
        _ => {}
    }
}

/// Decoder pass: random bytes, valid messages and mutations of valid
/// messages. Panics surface as test failures; everything else is counted.
pub fn fuzz_decoder(iterations: u64, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for _ in 0..iterations {
        let (bytes, original) = match rng.gen_range(0..3) {
            0 => {
                let n = rng.gen_range(0..128);
                ((0..n).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>(), None)
            }
            1 => {
                let m = valid_message(&mut rng);
                (encode_message(&m, 64).expect("valid message encodes"), Some(m))
            }
            _ => {
                let m = valid_message(&mut rng);
                let mut b = encode_message(&m, 64).expect("valid message encodes");
                mutate(&mut b, &mut rng);
                (b, None)
            }
        };
        report.datagrams += 1;
        match decode_message(&bytes) {
            Ok(m) => {
                report.decoded += 1;
                if let Some(orig) = original {
                    if m != orig {
                        report.roundtrip_failures += 1;
                    }
                }
            }
            Err(_) => {
                report.rejected += 1;
                if original.is_some() {
                    report.roundtrip_failures += 1;
                }
            }
        }
    }
    report
}

/// One reassembly trial: a step sent as shuffled, partly duplicated chunks
/// interleaved with chunks of an older step. Returns whether the step came
/// out bit-exact exactly once.
pub fn reassembly_trial(rng: &mut impl Rng, step_len: usize, packet_size: usize) -> bool {
    let step_id = rng.gen_range(1..10_000);
    let samples: Vec<f32> = (0..step_len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let stale: Vec<f32> = vec![0.25; step_len];
    let mut stream: Vec<Vec<u8>> = Vec::new();
    for p in chunk_samples(ChunkAddress::Context, step_id, &samples, packet_size).expect("chunks") {
        let bytes = encode_packet(&p, packet_size).expect("encodes");
        if rng.gen_bool(0.3) {
            stream.push(bytes.clone());
        }
        stream.push(bytes);
    }
    let old: Vec<Vec<u8>> = chunk_samples(ChunkAddress::Context, step_id - 1, &stale, packet_size)
        .expect("chunks")
        .iter()
        .map(|p| encode_packet(p, packet_size).expect("encodes"))
        .collect();
    stream.shuffle(rng);
    // stale chunks can only be recognised once the newer step has begun
    for b in old {
        if rng.gen_bool(0.5) {
            let at = rng.gen_range(1..=stream.len());
            stream.insert(at, b);
        }
    }
    let mut r = Reassembler::new(packet_size);
    let mut completions = 0;
    let mut exact = true;
    for b in &stream {
        let Ok(Message::Chunk(p)) = decode_message(b) else {
            return false;
        };
        match r.feed(&p) {
            Ok(FeedOutcome::Complete { step_id: s, samples: got }) => {
                completions += 1;
                exact &= s == step_id && got == samples;
            }
            Ok(_) => {}
            Err(_) => return false,
        }
    }
    completions == 1 && exact
}

pub fn fuzz_reassembly(trials: u64, seed: u64, report: &mut FuzzReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let step_len = rng.gen_range(1..20_000);
        let packet_size = rng.gen_range(64..4411);
        report.reassembly_trials += 1;
        if !reassembly_trial(&mut rng, step_len, packet_size) {
            report.reassembly_failures += 1;
        }
    }
}
