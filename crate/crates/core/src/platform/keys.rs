//! One-time-programmable fuses, battery-backed key storage and the
//! Secure/Normal world split that guards it.

use std::collections::BTreeMap;

use super::PlatformError;
use crate::crypto::{sha3_384, Digest, KeyMaterial, SYMMETRIC_KEY_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum World {
    Secure,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldContext {
    pub world: World,
    pub principal: String,
}

impl WorldContext {
    pub fn secure(principal: impl Into<String>) -> Self {
        WorldContext {
            world: World::Secure,
            principal: principal.into(),
        }
    }

    pub fn normal(principal: impl Into<String>) -> Self {
        WorldContext {
            world: World::Normal,
            principal: principal.into(),
        }
    }

    pub fn require_secure(&self) -> Result<(), PlatformError> {
        match self.world {
            World::Secure => Ok(()),
            World::Normal => Err(PlatformError::NotSecureWorld(self.principal.clone())),
        }
    }
}

/// eFUSE bank holding the digest of the root public key.
#[derive(Debug, Clone, Default)]
pub struct FuseBank {
    public_key_hash: Option<Digest>,
    programmed: bool,
}

impl FuseBank {
    pub fn program(&mut self, hash: Digest) -> Result<(), PlatformError> {
        if self.programmed {
            return Err(PlatformError::AlreadyProgrammed);
        }
        self.public_key_hash = Some(hash);
        self.programmed = true;
        Ok(())
    }

    pub fn public_key_hash(&self) -> Option<&Digest> {
        self.public_key_hash.as_ref()
    }

    pub fn is_programmed(&self) -> bool {
        self.programmed
    }
}

/// BBRAM-style volatile key storage. Every access requires a Secure-world
/// context, and nothing can be read or stored after zeroization.
#[derive(Debug, Default)]
pub struct VolatileKeyStore {
    device_decrypt_key: Option<KeyMaterial>,
    session_keys: BTreeMap<u8, KeyMaterial>,
    zeroized: bool,
}

impl VolatileKeyStore {
    fn guard(&self, ctx: &WorldContext) -> Result<(), PlatformError> {
        ctx.require_secure()?;
        if self.zeroized {
            return Err(PlatformError::KeystoreZeroized);
        }
        Ok(())
    }

    pub fn install_device_key(&mut self, ctx: &WorldContext, key: KeyMaterial) -> Result<(), PlatformError> {
        self.guard(ctx)?;
        self.device_decrypt_key = Some(key);
        Ok(())
    }

    pub fn device_key(&self, ctx: &WorldContext) -> Result<&KeyMaterial, PlatformError> {
        self.guard(ctx)?;
        self.device_decrypt_key.as_ref().ok_or(PlatformError::KeyAbsent("device"))
    }

    pub fn store_session_key(&mut self, ctx: &WorldContext, region: u8, key: KeyMaterial) -> Result<(), PlatformError> {
        self.guard(ctx)?;
        self.session_keys.insert(region, key);
        Ok(())
    }

    pub fn session_key(&self, ctx: &WorldContext, region: u8) -> Result<&KeyMaterial, PlatformError> {
        self.guard(ctx)?;
        self.session_keys.get(&region).ok_or(PlatformError::KeyAbsent("session"))
    }

    pub fn drop_session_key(&mut self, ctx: &WorldContext, region: u8) -> Result<(), PlatformError> {
        self.guard(ctx)?;
        self.session_keys.remove(&region);
        Ok(())
    }

    pub fn zeroize(&mut self, ctx: &WorldContext) -> Result<(), PlatformError> {
        ctx.require_secure()?;
        if let Some(k) = self.device_decrypt_key.as_mut() {
            k.bytes.fill(0);
        }
        for k in self.session_keys.values_mut() {
            k.bytes.fill(0);
        }
        self.device_decrypt_key = None;
        self.session_keys.clear();
        self.zeroized = true;
        Ok(())
    }

    pub fn is_zeroized(&self) -> bool {
        self.zeroized
    }

    /// True when no key material of any kind is held.
    pub fn is_empty(&self) -> bool {
        self.device_decrypt_key.is_none() && self.session_keys.is_empty()
    }
}

/// Device-unique symmetric key derived from a noise-free PUF response.
pub fn derive_puf_key(device_seed: &[u8]) -> KeyMaterial {
    let mut input = b"aegis-puf/v1".to_vec();
    input.extend_from_slice(device_seed);
    let d = sha3_384(&input);
    let mut k = [0u8; SYMMETRIC_KEY_LEN];
    k.copy_from_slice(&d.0[..SYMMETRIC_KEY_LEN]);
    KeyMaterial::symmetric(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuses_are_one_time_programmable() {
        let mut f = FuseBank::default();
        let h1 = sha3_384(b"root key");
        f.program(h1).unwrap();
        assert_eq!(f.program(sha3_384(b"other")), Err(PlatformError::AlreadyProgrammed));
        assert_eq!(f.public_key_hash(), Some(&h1));
    }

    #[test]
    fn normal_world_cannot_touch_keys() {
        let mut ks = VolatileKeyStore::default();
        let tee = WorldContext::secure("ta");
        let app = WorldContext::normal("app");
        ks.install_device_key(&tee, derive_puf_key(b"dev")).unwrap();
        assert!(matches!(ks.device_key(&app), Err(PlatformError::NotSecureWorld(_))));
        assert!(matches!(
            ks.install_device_key(&app, derive_puf_key(b"x")),
            Err(PlatformError::NotSecureWorld(_))
        ));
        assert!(matches!(ks.zeroize(&app), Err(PlatformError::NotSecureWorld(_))));
        assert!(ks.device_key(&tee).is_ok());
    }

    #[test]
    fn zeroize_clears_everything() {
        let mut ks = VolatileKeyStore::default();
        let tee = WorldContext::secure("ta");
        ks.install_device_key(&tee, derive_puf_key(b"dev")).unwrap();
        ks.store_session_key(&tee, 1, KeyMaterial::symmetric([1; 32])).unwrap();
        ks.zeroize(&tee).unwrap();
        assert!(ks.is_zeroized() && ks.is_empty());
        assert_eq!(ks.device_key(&tee), Err(PlatformError::KeystoreZeroized));
        assert_eq!(ks.session_key(&tee, 1), Err(PlatformError::KeystoreZeroized));
        assert_eq!(
            ks.store_session_key(&tee, 2, KeyMaterial::symmetric([2; 32])),
            Err(PlatformError::KeystoreZeroized)
        );
    }

    #[test]
    fn puf_key_is_deterministic_per_device() {
        assert_eq!(derive_puf_key(b"a"), derive_puf_key(b"a"));
        assert_ne!(derive_puf_key(b"a"), derive_puf_key(b"b"));
    }
}
