#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dca_net::checkpoint::parse::<f32, _>(&mut std::io::Cursor::new(data));
    let _ = dca_net::checkpoint::parse::<f64, _>(&mut std::io::Cursor::new(data));
});
