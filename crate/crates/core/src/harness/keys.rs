//! On-disk key directories shared by the CLI and scenarios.

use std::fs;
use std::path::Path;

use rand::{CryptoRng, RngCore};

use super::HarnessError;
use crate::crypto::{CryptoProfile, KeyId, KeyKind, KeyMaterial, KeyPair, ProfileId, SYMMETRIC_KEY_LEN};
use crate::platform::derive_puf_key;

const PROFILE_FILE: &str = "profile";
const ROOT_PUB: &str = "root.pub";
const ROOT_KEY: &str = "root.key";
const DEVICE_SEED: &str = "device.seed";
const LINK_KEY: &str = "link.key";

/// Ground-station key material for one simulated device: the root signing
/// pair, the device seed its PUF key is derived from, and the link key.
#[derive(Debug, Clone)]
pub struct KeyDirectory {
    pub profile: ProfileId,
    pub root: KeyPair,
    pub device_seed: Vec<u8>,
    pub link_key: KeyMaterial,
}

impl KeyDirectory {
    pub fn generate<R: RngCore + CryptoRng>(profile: ProfileId, rng: &mut R) -> Result<Self, HarnessError> {
        let root = CryptoProfile::from_id(profile).generate_keypair(rng)?;
        let mut device_seed = vec![0u8; 32];
        rng.fill_bytes(&mut device_seed);
        Ok(KeyDirectory {
            profile,
            root,
            device_seed,
            link_key: KeyMaterial::random_symmetric(rng),
        })
    }

    /// The device key the satellite derives at power-up; packages for the
    /// device are encrypted under it.
    pub fn device_key(&self) -> KeyMaterial {
        derive_puf_key(&self.device_seed)
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let profile = match self.profile {
            ProfileId::Reference => "reference",
            ProfileId::Test => "test",
        };
        for (name, text) in [
            (PROFILE_FILE, profile.to_string()),
            (ROOT_PUB, hex::encode(&self.root.public.bytes)),
            (ROOT_KEY, hex::encode(&self.root.private.bytes)),
            (DEVICE_SEED, hex::encode(&self.device_seed)),
            (LINK_KEY, hex::encode(&self.link_key.bytes)),
        ] {
            let path = dir.join(name);
            fs::write(&path, format!("{text}\n")).map_err(|e| HarnessError::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads a directory. The private root key is optional so that
    /// verification-only directories work.
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let read = |name: &str| -> Result<String, HarnessError> {
            let path = dir.join(name);
            fs::read_to_string(&path)
                .map(|s| s.trim().to_string())
                .map_err(|e| HarnessError::io(&path, e))
        };
        let hex_file = |name: &str| -> Result<Vec<u8>, HarnessError> {
            hex::decode(read(name)?).map_err(|e| HarnessError::Keys(format!("{name}: {e}")))
        };
        let profile: ProfileId = read(PROFILE_FILE)?.parse().map_err(HarnessError::Keys)?;
        let public = hex_file(ROOT_PUB)?;
        let key_id = KeyId::of(&public);
        let private = if dir.join(ROOT_KEY).exists() { hex_file(ROOT_KEY)? } else { Vec::new() };
        if profile == ProfileId::Test && !private.is_empty() && private != public {
            return Err(HarnessError::Keys("root.key does not match root.pub".into()));
        }
        let link = hex_file(LINK_KEY)?;
        if link.len() != SYMMETRIC_KEY_LEN {
            return Err(HarnessError::Keys(format!("link.key must be {SYMMETRIC_KEY_LEN} bytes")));
        }
        Ok(KeyDirectory {
            profile,
            root: KeyPair {
                public: KeyMaterial {
                    kind: KeyKind::AsymPublic,
                    bytes: public,
                    key_id,
                },
                private: KeyMaterial {
                    kind: KeyKind::AsymPrivate,
                    bytes: private,
                    key_id,
                },
            },
            device_seed: hex_file(DEVICE_SEED)?,
            link_key: KeyMaterial::symmetric_from_slice(&link)?,
        })
    }

    pub fn has_private_key(&self) -> bool {
        !self.root.private.bytes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = KeyDirectory::generate(ProfileId::Test, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        k.save(dir.path()).unwrap();
        let back = KeyDirectory::load(dir.path()).unwrap();
        assert_eq!(back.profile, ProfileId::Test);
        assert_eq!(back.root.public, k.root.public);
        assert_eq!(back.root.private, k.root.private);
        assert_eq!(back.device_seed, k.device_seed);
        assert_eq!(back.link_key, k.link_key);
    }

    #[test]
    fn public_only_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let k = KeyDirectory::generate(ProfileId::Test, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        k.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join(ROOT_KEY)).unwrap();
        let back = KeyDirectory::load(dir.path()).unwrap();
        assert!(!back.has_private_key());
    }
}
