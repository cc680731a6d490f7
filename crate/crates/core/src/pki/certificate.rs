// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use ciborium::value::Value;

use crate::codec::{self, CodecError, Fields, WireCodec};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::messages::TimeStamp;

/// Role a certificate is issued for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CertProfile {
    RootCa,
    SubCa,
    /// Long-lived device identity; only good for enrollment and maintenance.
    Factory,
    /// Device credential inside one operator's infrastructure.
    Operational,
    Server,
}

impl CertProfile {
    pub(crate) fn code(self) -> u64 {
        match self {
            CertProfile::RootCa => 0,
            CertProfile::SubCa => 1,
            CertProfile::Factory => 2,
            CertProfile::Operational => 3,
            CertProfile::Server => 4,
        }
    }

    pub(crate) fn from_code(code: u64) -> Result<Self, CodecError> {
        Ok(match code {
            0 => CertProfile::RootCa,
            1 => CertProfile::SubCa,
            2 => CertProfile::Factory,
            3 => CertProfile::Operational,
            4 => CertProfile::Server,
            other => {
                return Err(CodecError::malformed(format!(
                    "unknown certificate profile {other}"
                )))
            }
        })
    }

    pub fn is_ca(self) -> bool {
        matches!(self, CertProfile::RootCa | CertProfile::SubCa)
    }

    /// Whether a device presenting this profile may use `capability`.
    pub fn permits(self, capability: Capability) -> bool {
        match self {
            CertProfile::Operational => true,
            CertProfile::Factory => capability != Capability::Operate,
            _ => false,
        }
    }
}

/// Things a device may ask a server to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Capability {
    Enroll,
    FirmwareUpdate,
    Attest,
    /// Regular service traffic. Requires an operational certificate.
    Operate,
}

/// Issuer name plus serial; unique across all authorities.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CertRef {
    pub issuer: Vec<u8>,
    pub serial: u64,
}

/// Certificate fields covered by the issuer signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbsCertificate {
    pub serial: u64,
    pub subject_name: Vec<u8>,
    pub subject_public_key: PublicKey,
    pub issuer_name: Vec<u8>,
    pub not_before: TimeStamp,
    pub not_after: TimeStamp,
    pub profile: CertProfile,
}

impl TbsCertificate {
    fn fields(&self) -> Vec<Value> {
        vec![
            codec::uint(self.serial),
            codec::bytes(&self.subject_name),
            codec::bytes(self.subject_public_key.as_bytes()),
            codec::bytes(&self.issuer_name),
            self.not_before.to_value(),
            self.not_after.to_value(),
            codec::uint(self.profile.code()),
        ]
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::to_bytes(&Value::Array(self.fields()))
    }

    pub fn sign(self, issuer_key: &KeyPair) -> CompactCertificate {
        let signature = issuer_key.sign(&self.encode());
        CompactCertificate {
            tbs: self,
            signature,
        }
    }
}

/// Compact certificate: the signed body followed by the issuer signature.
#[derive(Clone, PartialEq, Eq)]
pub struct CompactCertificate {
    pub tbs: TbsCertificate,
    pub signature: Signature,
}

impl std::ops::Deref for CompactCertificate {
    type Target = TbsCertificate;

    fn deref(&self) -> &TbsCertificate {
        &self.tbs
    }
}

impl fmt::Debug for CompactCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompactCertificate")
            .field("serial", &self.serial)
            .field("subject", &String::from_utf8_lossy(&self.subject_name))
            .field("issuer", &String::from_utf8_lossy(&self.issuer_name))
            .field("profile", &self.profile)
            .field("validity", &(self.not_before.0, self.not_after.0))
            .finish()
    }
}

impl CompactCertificate {
    pub fn verify_signature(&self, issuer_key: &PublicKey) -> bool {
        crypto::verify(issuer_key, &self.tbs.encode(), &self.signature)
    }

    pub fn is_self_signed(&self) -> bool {
        self.issuer_name == self.subject_name && self.verify_signature(&self.subject_public_key)
    }

    pub fn is_valid_at(&self, now: TimeStamp) -> bool {
        self.not_before <= now && now <= self.not_after
    }

    pub fn cert_ref(&self) -> CertRef {
        CertRef {
            issuer: self.issuer_name.clone(),
            serial: self.serial,
        }
    }

    /// Digest of the full encoding, used for pinning.
    pub fn fingerprint(&self) -> Digest {
        crypto::digest(&codec::to_bytes(&self.to_value()))
    }

    pub fn subject(&self) -> String {
        String::from_utf8_lossy(&self.subject_name).into_owned()
    }

    pub fn issuer(&self) -> String {
        String::from_utf8_lossy(&self.issuer_name).into_owned()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(codec::to_bytes(&self.to_value()))
    }
}

impl WireCodec for CompactCertificate {
    fn validate(&self) -> Result<(), CodecError> {
        if self.not_before > self.not_after {
            return Err(CodecError::invariant(format!(
                "certificate {} validity inverted",
                self.serial
            )));
        }
        Ok(())
    }

    fn to_value(&self) -> Value {
        let mut fields = self.tbs.fields();
        fields.push(codec::bytes(&self.signature.0));
        Value::Array(fields)
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 8, "certificate")?;
        let tbs = TbsCertificate {
            serial: f.uint()?,
            subject_name: f.bytes()?,
            subject_public_key: PublicKey(f.fixed()?),
            issuer_name: f.bytes()?,
            not_before: TimeStamp::from_value(f.next())?,
            not_after: TimeStamp::from_value(f.next())?,
            profile: CertProfile::from_code(f.uint()?)?,
        };
        let cert = CompactCertificate {
            tbs,
            signature: Signature(f.fixed()?),
        };
        cert.validate()?;
        Ok(cert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factory_profile_cannot_operate() {
        assert!(!CertProfile::Factory.permits(Capability::Operate));
        assert!(CertProfile::Factory.permits(Capability::Enroll));
        assert!(CertProfile::Operational.permits(Capability::Operate));
        assert!(!CertProfile::Server.permits(Capability::Enroll));
    }

    #[test]
    fn certificate_round_trip_and_signature() {
        let key = crypto::generate_key_pair(&[1; 32]).unwrap();
        let cert = TbsCertificate {
            serial: 7,
            subject_name: b"root".to_vec(),
            subject_public_key: key.public_key(),
            issuer_name: b"root".to_vec(),
            not_before: TimeStamp(0),
            not_after: TimeStamp(10),
            profile: CertProfile::RootCa,
        }
        .sign(&key);
        assert!(cert.is_self_signed());
        let back = CompactCertificate::decode(&cert.encode().unwrap()).unwrap();
        assert_eq!(back, cert);
        let mut tampered = cert.clone();
        tampered.tbs.serial = 8;
        assert!(!tampered.verify_signature(&key.public_key()));
    }
}
