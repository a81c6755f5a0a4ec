//! Credential files in the shared directory the broker publishes to.
//!
//! ```text
//! ca_cert.bin                 CA certificate
//! allowed_services.bin        allowed-service list
//! service-<svc>-<vm>.key      PKCS#8 DER private key
//! service-<svc>-<vm>.cert     certificate
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::RsaPrivateKey;

use super::{malformed, AllowedServiceList, Certificate, PkiError, ServiceCredentials};
use crate::identity::ServiceKey;

pub const CA_CERT_FILE: &str = "ca_cert.bin";
pub const ALLOWED_FILE: &str = "allowed_services.bin";

fn service_stem(dir: &Path, key: ServiceKey) -> PathBuf {
    dir.join(format!("service-{}-{}", key.service_id, key.vm_id))
}

/// Writes via a temporary name so readers never see a partial file.
fn publish(path: &Path, bytes: &[u8]) -> Result<(), PkiError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// What every endpoint needs to judge its peers.
#[derive(Debug, Clone)]
pub struct TrustStore {
    pub ca: Certificate,
    pub allowed: AllowedServiceList,
}

pub fn write_trust(dir: &Path, ca: &Certificate, allowed: &AllowedServiceList) -> Result<(), PkiError> {
    fs::create_dir_all(dir)?;
    publish(&dir.join(ALLOWED_FILE), &allowed.to_bytes()?)?;
    publish(&dir.join(CA_CERT_FILE), &ca.to_bytes())
}

pub fn load_trust(dir: &Path) -> Result<TrustStore, PkiError> {
    let ca = Certificate::from_bytes(&fs::read(dir.join(CA_CERT_FILE))?)?;
    if !ca.is_self_signed() {
        return Err(malformed("CA certificate", "not self-signed"));
    }
    let allowed = AllowedServiceList::from_bytes(&fs::read(dir.join(ALLOWED_FILE))?)?;
    Ok(TrustStore { ca, allowed })
}

pub fn write_service(dir: &Path, creds: &ServiceCredentials) -> Result<(), PkiError> {
    fs::create_dir_all(dir)?;
    let stem = service_stem(dir, creds.subject());
    let der = creds
        .private_key()
        .to_pkcs8_der()
        .map_err(|e| PkiError::KeyEncoding(e.to_string()))?;
    publish(&stem.with_extension("key"), der.as_bytes())?;
    publish(&stem.with_extension("cert"), &creds.cert.to_bytes())
}

pub fn load_service(dir: &Path, key: ServiceKey) -> Result<ServiceCredentials, PkiError> {
    let stem = service_stem(dir, key);
    let private = RsaPrivateKey::from_pkcs8_der(&fs::read(stem.with_extension("key"))?)
        .map_err(|e| malformed("private key", e.to_string()))?;
    let cert = Certificate::from_bytes(&fs::read(stem.with_extension("cert"))?)?;
    if cert.subject != key || cert.public_key != private.to_public_key() {
        return Err(malformed("service credentials", format!("certificate does not match key for {key}")));
    }
    Ok(ServiceCredentials::new(private, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::{CertificateAuthority, KeySizes};
    use std::time::Duration;

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ca = CertificateAuthority::init(KeySizes::FAST, Duration::from_secs(60)).unwrap();
        let creds = ca.issue(ServiceKey::new(3, 2), Duration::from_secs(60)).unwrap();
        write_trust(dir.path(), ca.certificate(), ca.allowed()).unwrap();
        write_service(dir.path(), &creds).unwrap();
        let trust = load_trust(dir.path()).unwrap();
        assert_eq!(&trust.ca, ca.certificate());
        assert_eq!(&trust.allowed, ca.allowed());
        let back = load_service(dir.path(), ServiceKey::new(3, 2)).unwrap();
        assert_eq!(back.cert, creds.cert);
        assert!(load_service(dir.path(), ServiceKey::new(3, 3)).is_err());
    }
}
