#![no_main]

use lamn_core::simulate::{read_observations_csv, write_observations_csv, ObservationSidecar};
use libfuzzer_sys::fuzz_target;

// Input: sidecar JSON, a NUL byte, then the CSV body.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let (head, body) = (&data[..split], &data[split + 1..]);
    let Ok(sidecar) = serde_json::from_slice::<ObservationSidecar>(head) else { return };
    if sidecar.n > 100_000 {
        return;
    }
    if let Ok(obs) = read_observations_csv(body, &sidecar) {
        let mut out = Vec::new();
        write_observations_csv(&obs, &mut out).expect("writing to memory succeeds");
        let again = read_observations_csv(out.as_slice(), &sidecar).expect("written sets read back");
        assert_eq!(again, obs);
    }
});
