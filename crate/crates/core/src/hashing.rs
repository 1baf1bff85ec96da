use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// First 8 bytes of the SHA-256 of a config's canonical JSON encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ConfigHash(pub [u8; 8]);

impl ConfigHash {
    pub fn of<C: Serialize>(config: &C) -> Result<Self> {
        // serde_json::Value sorts object keys, which makes the encoding canonical.
        let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
        let digest = Sha256::digest(&canonical);
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        Ok(Self(out))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 8];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ConfigHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ConfigHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ConfigHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad config hash {s:?}")))
    }
}
