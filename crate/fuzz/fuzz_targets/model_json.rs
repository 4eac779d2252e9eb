#![no_main]

use lamn_core::model::ModelDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = ModelDocument::from_json(text) {
        if let Ok((spec, scheme)) = doc.build() {
            scheme.check_model(&spec).expect("built models pass their own scheme check");
            let again = ModelDocument::from_json(&doc.to_json()).expect("documents round-trip");
            assert_eq!(again, doc);
        }
    }
});
