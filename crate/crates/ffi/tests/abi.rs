use std::ffi::CStr;
use std::ptr;

use accomp_ffi::*;

fn config(step_frames: u32, w: i32) -> *mut AccompConfig {
    let mut cfg = ptr::null_mut();
    let st = unsafe { accomp_config_new(step_frames, w, 882, &mut cfg) };
    assert_eq!(st, AccompStatus::Ok);
    cfg
}

#[test]
fn geometry_matches_grid() {
    let cfg = config(16, 1);
    unsafe {
        assert_eq!(accomp_config_step_samples(cfg), 66_150);
        assert_eq!(accomp_config_response_samples(cfg), 66_150 + 882);
        assert!((accomp_config_step_ms(cfg) - 1500.0).abs() < 1e-9);
        accomp_config_free(cfg);
    }
}

#[test]
fn masks_are_prefixes() {
    for (k, w) in [(16u32, 1i32), (8, 0), (8, 2), (16, 2), (24, 1)] {
        let cfg = config(k, w);
        let mut ctx = [9u8; 64];
        let mut tgt = [9u8; 64];
        unsafe {
            assert_eq!(accomp_context_mask(cfg, ctx.as_mut_ptr(), 64), AccompStatus::Ok);
            assert_eq!(accomp_target_mask(cfg, tgt.as_mut_ptr(), 64), AccompStatus::Ok);
            accomp_config_free(cfg);
        }
        for t in 0..64i32 {
            assert_eq!(ctx[t as usize], u8::from(t < 64 - (w + 1) * k as i32), "k={k} w={w} t={t}");
            assert_eq!(tgt[t as usize], u8::from(t < 64 - k as i32), "k={k} w={w} t={t}");
        }
    }
}

#[test]
fn short_and_null_buffers_are_reported() {
    let cfg = config(16, 1);
    let mut small = [0u8; 10];
    unsafe {
        assert_eq!(accomp_context_mask(cfg, small.as_mut_ptr(), 10), AccompStatus::BufferTooSmall);
        assert_eq!(accomp_target_mask(cfg, ptr::null_mut(), 64), AccompStatus::NullPointer);
        assert_eq!(accomp_context_mask(ptr::null(), small.as_mut_ptr(), 10), AccompStatus::NullPointer);
        assert_eq!(accomp_config_step_samples(ptr::null()), 0);
        accomp_config_free(cfg);
        accomp_config_free(ptr::null_mut());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ptr::null_mut();
    unsafe {
        // fractional sample step
        assert_eq!(accomp_config_new(3, 1, 882, &mut cfg), AccompStatus::InvalidConfig);
        assert!(cfg.is_null());
        // prediction region leaves the window
        assert_eq!(accomp_config_new(32, 1, 882, &mut cfg), AccompStatus::InvalidConfig);
        assert_eq!(accomp_config_new(0, 1, 882, &mut cfg), AccompStatus::InvalidConfig);
        assert_eq!(accomp_config_new(16, 1, 882, ptr::null_mut()), AccompStatus::NullPointer);
    }
}

#[test]
fn intervals_follow_the_cursor() {
    let cfg = config(16, 1);
    let step = 66_150i64;
    let curr = 4 * step;
    let (mut r, mut wr, mut f) = (AccompSpan::default(), AccompSpan::default(), AccompSpan::default());
    unsafe {
        assert_eq!(accomp_read_interval(cfg, curr, &mut r), AccompStatus::Ok);
        assert_eq!(accomp_write_interval(cfg, curr, &mut wr), AccompStatus::Ok);
        assert_eq!(accomp_fade_interval(cfg, curr, &mut f), AccompStatus::Ok);
        assert_eq!(accomp_write_interval(cfg, curr, ptr::null_mut()), AccompStatus::NullPointer);
        accomp_config_free(cfg);
    }
    assert_eq!(r.end, curr);
    assert_eq!(r.start, curr - step);
    assert_eq!(wr, AccompSpan { start: curr + step, end: curr + 2 * step });
    assert_eq!(f, AccompSpan { start: wr.start - 882, end: wr.start });
}

#[test]
fn latency_arithmetic() {
    let t = AccompStageTimings {
        client_to_server_ms: 10.0,
        encode_ms: 20.0,
        sampling_ms: 300.0,
        decode_ms: 40.0,
        server_to_client_ms: 10.0,
    };
    let total = unsafe { accomp_full_cycle(&t) };
    assert!((total - 380.0).abs() < 1e-12);
    assert!(unsafe { accomp_full_cycle(ptr::null()) }.is_nan());
    assert!(accomp_rt_feasible(380.0, 1500.0));
    assert!(!accomp_rt_feasible(1600.0, 1500.0));

    let (mut r, mut k) = (0.0f64, 0u32);
    let st = unsafe { accomp_min_step_ratio(500.0, 100.0, 6000.0, 64, &mut r, &mut k) };
    assert_eq!(st, AccompStatus::Ok);
    // r* = d / (T - c) for a local setup
    assert!((r - 500.0 / 5900.0).abs() < 1e-12, "{r}");
    assert_eq!(k, 6);
    let st = unsafe { accomp_min_step_ratio(7000.0, 100.0, 6000.0, 64, &mut r, &mut k) };
    assert_eq!(st, AccompStatus::NoFeasibleRatio);
}

#[test]
fn step_round_trips_through_reassembler() {
    let samples: Vec<f32> = (0..66_150).map(|i| ((i as f32) * 0.001).sin()).collect();
    let ps = 4410usize;
    let chunks = accomp_chunk_count(samples.len() as u64, ps as u64) as usize;
    assert_eq!(chunks, 15);
    let per = accomp_chunk_datagram_len(AccompAddress::Context, ps);
    let mut buf = vec![0u8; per * chunks];
    let mut lens = vec![0usize; chunks];
    let mut count = 0usize;
    let st = unsafe {
        accomp_encode_step(
            AccompAddress::Context,
            7,
            samples.as_ptr(),
            samples.len(),
            ps,
            buf.as_mut_ptr(),
            buf.len(),
            lens.as_mut_ptr(),
            lens.len(),
            &mut count,
        )
    };
    assert_eq!(st, AccompStatus::Ok);
    assert_eq!(count, chunks);
    assert!(lens.iter().all(|&l| l == per));

    let mut r = ptr::null_mut();
    assert_eq!(unsafe { accomp_reassembler_new(ps, &mut r) }, AccompStatus::Ok);
    let mut order: Vec<usize> = (0..chunks).rev().collect();
    order.insert(3, 5);
    let mut outcome = AccompFeed::Incomplete;
    let mut step_id = 0u32;
    let mut completes = 0;
    for i in order {
        let d = &buf[i * per..(i + 1) * per];
        let st = unsafe { accomp_reassembler_feed(r, d.as_ptr(), d.len(), &mut outcome, &mut step_id) };
        assert_eq!(st, AccompStatus::Ok);
        assert_eq!(step_id, 7);
        completes += usize::from(outcome == AccompFeed::Complete);
    }
    assert_eq!(completes, 1);
    let mut out = vec![0f32; samples.len()];
    let mut written = 0usize;
    unsafe {
        assert_eq!(accomp_reassembler_take(r, out.as_mut_ptr(), 10, &mut written), AccompStatus::BufferTooSmall);
        assert_eq!(written, samples.len());
        assert_eq!(accomp_reassembler_take(r, out.as_mut_ptr(), out.len(), &mut written), AccompStatus::Ok);
        assert_eq!(accomp_reassembler_take(r, out.as_mut_ptr(), out.len(), &mut written), AccompStatus::Empty);
        accomp_reassembler_free(r);
    }
    assert_eq!(out, samples);
}

#[test]
fn single_chunk_encode_and_garbage_decode() {
    let samples = [0.5f32; 100];
    let mut buf = [0u8; 16];
    let mut written = 0usize;
    let st = unsafe {
        accomp_encode_chunk(
            AccompAddress::Prediction,
            3,
            0,
            1,
            samples.as_ptr(),
            samples.len(),
            100,
            buf.as_mut_ptr(),
            buf.len(),
            &mut written,
        )
    };
    assert_eq!(st, AccompStatus::BufferTooSmall);
    assert_eq!(written, accomp_chunk_datagram_len(AccompAddress::Prediction, 100));
    let mut big = vec![0u8; written];
    let st = unsafe {
        accomp_encode_chunk(
            AccompAddress::Prediction,
            3,
            0,
            1,
            samples.as_ptr(),
            samples.len(),
            100,
            big.as_mut_ptr(),
            big.len(),
            &mut written,
        )
    };
    assert_eq!(st, AccompStatus::Ok);

    let mut r = ptr::null_mut();
    let (mut outcome, mut id) = (AccompFeed::Incomplete, 0u32);
    unsafe {
        assert_eq!(accomp_reassembler_new(100, &mut r), AccompStatus::Ok);
        let junk = [1u8, 2, 3];
        assert_eq!(accomp_reassembler_feed(r, junk.as_ptr(), 3, &mut outcome, &mut id), AccompStatus::Decode);
        assert_eq!(accomp_reassembler_feed(r, big.as_ptr(), big.len(), &mut outcome, &mut id), AccompStatus::Ok);
        assert_eq!(outcome, AccompFeed::Complete);
        accomp_reassembler_free(r);
        assert_eq!(accomp_reassembler_new(0, &mut r), AccompStatus::InvalidConfig);
    }
}

#[test]
fn strings_are_terminated() {
    let v = unsafe { CStr::from_ptr(accomp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    for s in [AccompStatus::Ok, AccompStatus::Panic, AccompStatus::BufferTooSmall] {
        let m = unsafe { CStr::from_ptr(accomp_status_str(s)) };
        assert!(!m.to_bytes().is_empty());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/accomp.h");
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() else {
        eprintln!("no C compiler; skipping header check");
        return;
    };
    assert!(status.success());
}
