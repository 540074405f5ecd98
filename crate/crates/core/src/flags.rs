use bitflags::bitflags;
use serde::{Deserialize, Serialize};

bitflags! {
    /// Per-step status bits, written to the `flags` trace column as an integer.
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct StatusFlags: u32 {
        /// A slip denominator fell below the low-speed floor.
        const LOW_SPEED = 1 << 0;
        /// A rear wheel load was clamped at zero.
        const WHEEL_LIFT = 1 << 1;
        const MPC_ACTIVE = 1 << 2;
        const ESC_ACTIVE = 1 << 3;
        const BRAKING = 1 << 4;
        const TORQUE_SATURATED = 1 << 5;
        const LATERAL_SCALED = 1 << 6;
    }
}
