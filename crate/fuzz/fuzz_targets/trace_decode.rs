#![no_main]

//! Input layout: manifest JSON, a single 0 byte, then the payload.

use libfuzzer_sys::fuzz_target;
use louiskv::trace::{decode_trace, TraceManifest};

fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else {
        return;
    };
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    if let Ok(manifest) = TraceManifest::parse(text) {
        if let Ok(trace) = decode_trace(&manifest, &data[split + 1..]) {
            assert_eq!(
                trace.q.data.len(),
                trace.geometry.num_layers * trace.gen_len * trace.geometry.num_q_heads * trace.geometry.head_dim
            );
        }
    }
});
