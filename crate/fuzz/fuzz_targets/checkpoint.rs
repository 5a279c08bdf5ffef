#![no_main]

use laffi_core::lora::adapters_from_container;
use laffi_core::model::checkpoint::{Container, ContainerKind};
use laffi_core::model::TransformerWeights;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::decode(data) else { return };
    let bytes = c.encode().expect("decoded container re-encodes");
    // Compare bytes, not values: NaN weights are legal and never equal themselves.
    let again = Container::decode(&bytes).expect("re-decodes");
    assert_eq!(again.encode().expect("re-encodes"), bytes);
    match c.kind {
        ContainerKind::Model => {
            let _ = TransformerWeights::from_container(c);
        }
        ContainerKind::Adapters => {
            let _ = adapters_from_container(c);
        }
    }
});
