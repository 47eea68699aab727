//! Identifier newtypes shared by every subsystem.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident($inner:ty)) => {
        $(#[$meta])*
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(
    /// Task identifier; smaller ids win priority ties.
    TaskId(u64)
);
id_type!(
    /// Data item identifier.
    DataId(u64)
);
id_type!(
    /// Compute node identifier.
    NodeId(u32)
);
id_type!(
    /// Allocation block identifier.
    BlockId(u32)
);
id_type!(
    /// Worker slot (one core of one node).
    WorkerId(u32)
);
id_type!(
    /// Iteration template identifier.
    TemplateId(u32)
);
id_type!(
    /// Middleware scheduler identifier.
    SchedulerId(u32)
);
