#![no_main]

use libfuzzer_sys::fuzz_target;
use ubna_core::datagen::{DatasetSpec, DomainDataset, ImageSource};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = DatasetSpec::from_toml_str(text) else { return };
    let again = DatasetSpec::from_toml_str(&spec.to_toml_string()).expect("serialized spec parses");
    assert_eq!(again, spec);
    // Keep generation cheap; validation already bounds the sizes.
    if spec.height * spec.width <= 64 * 64 {
        let d = DomainDataset::new(spec).expect("validated spec builds");
        if !d.is_empty() {
            let _ = d.generate(0).expect("first image generates");
        }
    }
});
