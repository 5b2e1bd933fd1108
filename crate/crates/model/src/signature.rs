//! Facet signatures.
//!
//! The scheme is pluggable behind [`SignatureScheme`]. The bundled
//! [`KeyRing`] is a keyed MAC (HMAC-SHA256) with one secret per registered
//! node; an asymmetric scheme can replace it without touching callers.

use std::collections::HashMap;

use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::id::NodeId;
use crate::xml::FacetXml;

pub const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: NodeId,
    pub digest: [u8; DIGEST_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignatureError {
    #[error("node `{0}` has no registered signing key")]
    UnknownSigner(NodeId),
}

pub trait SignatureScheme: Send + Sync {
    fn sign(&self, signer: &NodeId, payload: &[u8]) -> Result<Signature, SignatureError>;

    /// Unknown signers verify as `false`.
    fn verify(&self, signer: &NodeId, payload: &[u8], sig: &Signature) -> bool;

    fn sign_doc(&self, signer: &NodeId, doc: &FacetXml) -> Result<Signature, SignatureError> {
        self.sign(signer, &doc.canonicalize())
    }

    fn verify_doc(&self, signer: &NodeId, doc: &FacetXml, sig: &Signature) -> bool {
        self.verify(signer, &doc.canonicalize(), sig)
    }
}

type HmacSha256 = Hmac<Sha256>;

/// Registry of per-node MAC secrets.
#[derive(Clone, Debug, Default)]
pub struct KeyRing {
    secrets: HashMap<NodeId, Vec<u8>>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `node` with a secret derived from `seed`. Re-registering
    /// replaces the previous secret.
    pub fn register(&mut self, node: NodeId, seed: u64) {
        let mut secret = Vec::with_capacity(node.as_str().len() + 8);
        secret.extend_from_slice(&seed.to_be_bytes());
        secret.extend_from_slice(node.as_str().as_bytes());
        self.secrets.insert(node, secret);
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.secrets.contains_key(node)
    }

    fn mac(secret: &[u8], payload: &[u8]) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
        mac.update(payload);
        mac
    }
}

impl SignatureScheme for KeyRing {
    fn sign(&self, signer: &NodeId, payload: &[u8]) -> Result<Signature, SignatureError> {
        let secret = self
            .secrets
            .get(signer)
            .ok_or_else(|| SignatureError::UnknownSigner(signer.clone()))?;
        let digest = Self::mac(secret, payload).finalize().into_bytes();
        Ok(Signature {
            signer: signer.clone(),
            digest: digest.into(),
        })
    }

    fn verify(&self, signer: &NodeId, payload: &[u8], sig: &Signature) -> bool {
        if &sig.signer != signer {
            return false;
        }
        match self.secrets.get(signer) {
            Some(secret) => Self::mac(secret, payload).verify_slice(&sig.digest).is_ok(),
            None => false,
        }
    }
}
