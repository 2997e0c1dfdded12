//! The five label codes.

use core::fmt;

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Structure {
    Background = 0,
    Pons = 1,
    Midbrain = 2,
    Medulla = 3,
    Scp = 4,
}

impl Structure {
    pub const ALL: [Structure; NUM_CLASSES] =
        [Structure::Background, Structure::Pons, Structure::Midbrain, Structure::Medulla, Structure::Scp];

    /// The four brainstem sub-structures.
    pub const FOREGROUND: [Structure; 4] =
        [Structure::Pons, Structure::Midbrain, Structure::Medulla, Structure::Scp];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Background => "background",
            Structure::Pons => "pons",
            Structure::Midbrain => "midbrain",
            Structure::Medulla => "medulla",
            Structure::Scp => "scp",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
