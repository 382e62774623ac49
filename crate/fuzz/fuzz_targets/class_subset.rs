#![no_main]

use libfuzzer_sys::fuzz_target;
use ubna_core::eval::ClassSubset;

fuzz_target!(|data: &[u8]| {
    let Some((&classes, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(subset) = ClassSubset::parse(text, usize::from(classes)) {
        assert!(subset.ids().windows(2).all(|w| w[0] < w[1]));
        assert!(subset.ids().iter().all(|&s| s < usize::from(classes)));
    }
});
