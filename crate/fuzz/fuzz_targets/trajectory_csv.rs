//! Trajectory CSV parsing must never panic, and whatever parses must
//! serialise back to text that parses to the same trajectory.

#![no_main]

use libfuzzer_sys::fuzz_target;
use tpl_core::io::{parse_trajectory_csv, trajectory_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(traj) = parse_trajectory_csv(text) else { return };
    let Ok(csv) = trajectory_to_csv(&traj) else { return };
    let back = parse_trajectory_csv(&csv).expect("serialised trajectory parses");
    assert_eq!(trajectory_to_csv(&back).expect("serialises again"), csv);
});
