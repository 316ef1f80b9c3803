//! Key management and envelope encryption.
//!
//! Three purposes get independent key material: member attributes (an RSA
//! pair), compensation (another RSA pair), and the slice threshold store (a
//! symmetric key). Payloads are sealed with a one-time AES-256-GCM data key;
//! the data key is wrapped with RSA-OAEP (or AES-GCM for the symmetric
//! purpose). The wrap is bound to the envelope header, so an envelope only
//! opens under the exact purpose and version it names.

use std::fmt;
use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::rngs::OsRng;
use rand::RngCore;
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::model::Timestamp;

pub const RSA_BITS: usize = 2048;
const DATA_KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;
const SALT_LEN: usize = 16;
const PBKDF2_ROUNDS: u32 = 20_000;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("key purpose {key} does not match requested purpose {requested}")]
    PurposeMismatch { key: Purpose, requested: Purpose },
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("no key version {version} for purpose {purpose}")]
    UnknownVersion { purpose: Purpose, version: u32 },
    #[error("keystore for {0} has no active key")]
    NoActiveKey(Purpose),
    #[error("wrong key type for purpose {0}")]
    WrongKeyType(Purpose),
    #[error("keystore write failed: {0}")]
    KeystoreWrite(std::io::Error),
    #[error("keystore read failed: {0}")]
    KeystoreRead(String),
    #[error("rotation to version {new_version} incomplete; {} envelope(s) not re-encrypted", failed.len())]
    PartialRotation { new_version: u32, failed: Vec<String> },
    #[error("key generation failed: {0}")]
    KeyGen(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Attributes,
    Compensation,
    Threshold,
}

impl Purpose {
    pub const ALL: [Purpose; 3] = [Purpose::Attributes, Purpose::Compensation, Purpose::Threshold];

    pub fn tag(self) -> u8 {
        match self {
            Purpose::Attributes => 1,
            Purpose::Compensation => 2,
            Purpose::Threshold => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Purpose::Attributes),
            2 => Some(Purpose::Compensation),
            3 => Some(Purpose::Threshold),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Attributes => "attributes",
            Purpose::Compensation => "compensation",
            Purpose::Threshold => "threshold",
        }
    }

    pub fn is_symmetric(self) -> bool {
        self == Purpose::Threshold
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Purpose {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Purpose::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown purpose `{s}`"))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub purpose: Purpose,
    pub version: u32,
    key: RsaPublicKey,
}

#[derive(Clone)]
pub struct PrivateKey {
    pub purpose: Purpose,
    pub version: u32,
    key: RsaPrivateKey,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    pub version: u32,
    bytes: [u8; DATA_KEY_LEN],
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}, v{})", self.purpose, self.version)
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({}, v{})", self.purpose, self.version)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey(threshold, v{})", self.version)
    }
}

impl PrivateKey {
    pub fn generate(purpose: Purpose, version: u32) -> Result<Self, CryptoError> {
        if purpose.is_symmetric() {
            return Err(CryptoError::WrongKeyType(purpose));
        }
        let key = RsaPrivateKey::new(&mut OsRng, RSA_BITS).map_err(|e| CryptoError::KeyGen(e.to_string()))?;
        Ok(PrivateKey { purpose, version, key })
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey { purpose: self.purpose, version: self.version, key: self.key.to_public_key() }
    }

    fn to_der(&self) -> Vec<u8> {
        self.key.to_pkcs8_der().expect("RSA key encodes").as_bytes().to_vec()
    }

    fn from_der(purpose: Purpose, version: u32, der: &[u8]) -> Result<Self, CryptoError> {
        let key = RsaPrivateKey::from_pkcs8_der(der).map_err(|e| CryptoError::KeystoreRead(e.to_string()))?;
        Ok(PrivateKey { purpose, version, key })
    }

    /// Byte-level comparison of the private key material.
    pub fn material_eq(&self, other: &PrivateKey) -> bool {
        self.to_der() == other.to_der()
    }
}

impl PublicKey {
    fn to_der(&self) -> Vec<u8> {
        self.key.to_public_key_der().expect("RSA key encodes").as_bytes().to_vec()
    }

    fn from_der(purpose: Purpose, version: u32, der: &[u8]) -> Result<Self, CryptoError> {
        let key = RsaPublicKey::from_public_key_der(der).map_err(|e| CryptoError::KeystoreRead(e.to_string()))?;
        Ok(PublicKey { purpose, version, key })
    }
}

impl SymmetricKey {
    pub fn generate(version: u32) -> Self {
        let mut bytes = [0u8; DATA_KEY_LEN];
        OsRng.fill_bytes(&mut bytes);
        SymmetricKey { version, bytes }
    }

    pub fn purpose(&self) -> Purpose {
        Purpose::Threshold
    }
}

/// A key that can seal an envelope.
#[derive(Debug, Clone, Copy)]
pub enum SealKey<'a> {
    Public(&'a PublicKey),
    Symmetric(&'a SymmetricKey),
}

/// A key that can open an envelope.
#[derive(Debug, Clone, Copy)]
pub enum OpenKey<'a> {
    Private(&'a PrivateKey),
    Symmetric(&'a SymmetricKey),
}

impl SealKey<'_> {
    pub fn purpose(&self) -> Purpose {
        match self {
            SealKey::Public(k) => k.purpose,
            SealKey::Symmetric(_) => Purpose::Threshold,
        }
    }

    pub fn version(&self) -> u32 {
        match self {
            SealKey::Public(k) => k.version,
            SealKey::Symmetric(k) => k.version,
        }
    }
}

impl OpenKey<'_> {
    pub fn purpose(&self) -> Purpose {
        match self {
            OpenKey::Private(k) => k.purpose,
            OpenKey::Symmetric(_) => Purpose::Threshold,
        }
    }

    pub fn version(&self) -> u32 {
        match self {
            OpenKey::Private(k) => k.version,
            OpenKey::Symmetric(k) => k.version,
        }
    }
}

impl<'a> From<&'a PublicKey> for SealKey<'a> {
    fn from(k: &'a PublicKey) -> Self {
        SealKey::Public(k)
    }
}

impl<'a> From<&'a SymmetricKey> for SealKey<'a> {
    fn from(k: &'a SymmetricKey) -> Self {
        SealKey::Symmetric(k)
    }
}

impl<'a> From<&'a PrivateKey> for OpenKey<'a> {
    fn from(k: &'a PrivateKey) -> Self {
        OpenKey::Private(k)
    }
}

impl<'a> From<&'a SymmetricKey> for OpenKey<'a> {
    fn from(k: &'a SymmetricKey) -> Self {
        OpenKey::Symmetric(k)
    }
}

/// Every key used by the system, in one place. Only tests and the
/// single-process harness hold all of them; services receive their subset.
#[derive(Debug, Clone)]
pub struct KeyRing {
    pub m_pub: PublicKey,
    pub m_pri: PrivateKey,
    pub c_pub: PublicKey,
    pub c_pri: PrivateKey,
    pub t_sym: SymmetricKey,
}

impl KeyRing {
    pub fn generate() -> Result<Self, CryptoError> {
        let m_pri = PrivateKey::generate(Purpose::Attributes, 1)?;
        let c_pri = PrivateKey::generate(Purpose::Compensation, 1)?;
        Ok(KeyRing {
            m_pub: m_pri.public_key(),
            c_pub: c_pri.public_key(),
            m_pri,
            c_pri,
            t_sym: SymmetricKey::generate(1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub purpose: Purpose,
    pub key_version: u32,
    pub wrapped_key: Vec<u8>,
    /// Nonce followed by the AES-GCM ciphertext and tag.
    pub ciphertext: Vec<u8>,
}

impl Envelope {
    fn header(purpose: Purpose, version: u32) -> [u8; 5] {
        let v = version.to_be_bytes();
        [purpose.tag(), v[0], v[1], v[2], v[3]]
    }

    /// `purpose:u8 | version:u32be | wrapped_len:u32be | wrapped | ct_len:u32be | ct`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.wrapped_key.len() + self.ciphertext.len());
        out.extend_from_slice(&Self::header(self.purpose, self.key_version));
        out.extend_from_slice(&(self.wrapped_key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.wrapped_key);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        fn take<'b>(buf: &mut &'b [u8], n: usize) -> Result<&'b [u8], CryptoError> {
            if buf.len() < n {
                return Err(CryptoError::Malformed("truncated"));
            }
            let (head, tail) = buf.split_at(n);
            *buf = tail;
            Ok(head)
        }
        fn take_u32(buf: &mut &[u8]) -> Result<u32, CryptoError> {
            Ok(u32::from_be_bytes(take(buf, 4)?.try_into().unwrap()))
        }
        let mut buf = bytes;
        let purpose = Purpose::from_tag(take(&mut buf, 1)?[0]).ok_or(CryptoError::Malformed("purpose tag"))?;
        let key_version = take_u32(&mut buf)?;
        let wl = take_u32(&mut buf)? as usize;
        let wrapped_key = take(&mut buf, wl)?.to_vec();
        let cl = take_u32(&mut buf)? as usize;
        let ciphertext = take(&mut buf, cl)?.to_vec();
        if !buf.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes"));
        }
        Ok(Envelope { purpose, key_version, wrapped_key, ciphertext })
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.to_bytes())
    }

    pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
        let bytes = B64.decode(s).map_err(|_| CryptoError::Malformed("base64"))?;
        Self::from_bytes(&bytes)
    }
}

fn oaep_label(purpose: Purpose, version: u32) -> String {
    format!("payslice:{}:{}", purpose.as_str(), version)
}

fn payload_aad(purpose: Purpose) -> [u8; 9] {
    let mut aad = *b"payload:\0";
    aad[8] = purpose.tag();
    aad
}

fn aes_seal(key: &[u8; DATA_KEY_LEN], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(key.into());
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption does not fail for in-memory buffers");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    out
}

fn aes_open(key: &[u8; DATA_KEY_LEN], sealed: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < NONCE_LEN {
        return Err(CryptoError::AuthFailure);
    }
    let (nonce, ct) = sealed.split_at(NONCE_LEN);
    Aes256Gcm::new(key.into())
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::AuthFailure)
}

fn wrap_data_key(data_key: &[u8; DATA_KEY_LEN], key: SealKey<'_>) -> Result<Vec<u8>, CryptoError> {
    let (purpose, version) = (key.purpose(), key.version());
    match key {
        SealKey::Public(pk) => pk
            .key
            .encrypt(&mut OsRng, Oaep::new_with_label::<Sha256, _>(oaep_label(purpose, version)), data_key)
            .map_err(|e| CryptoError::KeyGen(e.to_string())),
        SealKey::Symmetric(sk) => Ok(aes_seal(&sk.bytes, data_key, &Envelope::header(purpose, version))),
    }
}

fn unwrap_data_key(env: &Envelope, key: OpenKey<'_>) -> Result<[u8; DATA_KEY_LEN], CryptoError> {
    if key.purpose() != env.purpose || key.version() != env.key_version {
        return Err(CryptoError::AuthFailure);
    }
    let raw = match key {
        OpenKey::Private(sk) => sk
            .key
            .decrypt(Oaep::new_with_label::<Sha256, _>(oaep_label(env.purpose, env.key_version)), &env.wrapped_key)
            .map_err(|_| CryptoError::AuthFailure)?,
        OpenKey::Symmetric(sk) => {
            aes_open(&sk.bytes, &env.wrapped_key, &Envelope::header(env.purpose, env.key_version))?
        }
    };
    raw.try_into().map_err(|_| CryptoError::AuthFailure)
}

pub fn encrypt<'a>(payload: &[u8], key: impl Into<SealKey<'a>>, purpose: Purpose) -> Result<Envelope, CryptoError> {
    let key = key.into();
    if key.purpose() != purpose {
        return Err(CryptoError::PurposeMismatch { key: key.purpose(), requested: purpose });
    }
    let mut data_key = [0u8; DATA_KEY_LEN];
    OsRng.fill_bytes(&mut data_key);
    let wrapped_key = wrap_data_key(&data_key, key)?;
    let ciphertext = aes_seal(&data_key, payload, &payload_aad(purpose));
    Ok(Envelope { purpose, key_version: key.version(), wrapped_key, ciphertext })
}

pub fn decrypt<'a>(envelope: &Envelope, key: impl Into<OpenKey<'a>>) -> Result<Vec<u8>, CryptoError> {
    let data_key = unwrap_data_key(envelope, key.into())?;
    aes_open(&data_key, &envelope.ciphertext, &payload_aad(envelope.purpose))
}

/// Re-wraps the data key under `new_key`. The payload ciphertext is kept.
pub fn rewrap(envelope: &Envelope, old_key: OpenKey<'_>, new_key: SealKey<'_>) -> Result<Envelope, CryptoError> {
    if new_key.purpose() != envelope.purpose {
        return Err(CryptoError::PurposeMismatch { key: new_key.purpose(), requested: envelope.purpose });
    }
    let data_key = unwrap_data_key(envelope, old_key)?;
    Ok(Envelope {
        purpose: envelope.purpose,
        key_version: new_key.version(),
        wrapped_key: wrap_data_key(&data_key, new_key)?,
        ciphertext: envelope.ciphertext.clone(),
    })
}

/// One versioned key as persisted in a keystore file. `material` is the
/// secret half, sealed under a passphrase-derived key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub purpose: Purpose,
    pub version: u32,
    pub created_at: Timestamp,
    pub material: String,
    pub retired: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public: Option<String>,
}

fn passphrase_key(passphrase: &str, salt: &[u8]) -> [u8; DATA_KEY_LEN] {
    let mut out = [0u8; DATA_KEY_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
    out
}

fn seal_material(passphrase: &str, purpose: Purpose, version: u32, secret: &[u8]) -> String {
    let mut salt = [0u8; SALT_LEN];
    OsRng.fill_bytes(&mut salt);
    let key = passphrase_key(passphrase, &salt);
    let mut out = salt.to_vec();
    out.extend(aes_seal(&key, secret, &Envelope::header(purpose, version)));
    B64.encode(out)
}

fn open_material(passphrase: &str, rec: &KeyRecord) -> Result<Vec<u8>, CryptoError> {
    let raw = B64.decode(&rec.material).map_err(|_| CryptoError::KeystoreRead("material is not base64".into()))?;
    if raw.len() < SALT_LEN {
        return Err(CryptoError::KeystoreRead("material truncated".into()));
    }
    let (salt, sealed) = raw.split_at(SALT_LEN);
    aes_open(&passphrase_key(passphrase, salt), sealed, &Envelope::header(rec.purpose, rec.version))
}

/// Passphrase-protected key file for one purpose, holding every version.
#[derive(Debug, Clone)]
pub struct Keystore {
    path: Option<PathBuf>,
    purpose: Purpose,
    passphrase: String,
    records: Vec<KeyRecord>,
}

impl Keystore {
    pub fn file_name(purpose: Purpose) -> String {
        format!("{}.keystore.json", purpose.as_str())
    }

    pub fn in_memory(purpose: Purpose, passphrase: impl Into<String>) -> Self {
        Keystore { path: None, purpose, passphrase: passphrase.into(), records: Vec::new() }
    }

    /// Opens `<dir>/<purpose>.keystore.json`, or starts an empty store there.
    pub fn open(dir: &Path, purpose: Purpose, passphrase: impl Into<String>) -> Result<Self, CryptoError> {
        let path = dir.join(Self::file_name(purpose));
        let records: Vec<KeyRecord> = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CryptoError::KeystoreRead(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| CryptoError::KeystoreRead(e.to_string()))?
        } else {
            Vec::new()
        };
        if let Some(r) = records.iter().find(|r| r.purpose != purpose) {
            return Err(CryptoError::KeystoreRead(format!(
                "{} holds a {} key",
                path.display(),
                r.purpose
            )));
        }
        Ok(Keystore { path: Some(path), purpose, passphrase: passphrase.into(), records })
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[KeyRecord] {
        &self.records
    }

    pub fn current_version(&self) -> Option<u32> {
        self.records.iter().filter(|r| !r.retired).map(|r| r.version).max()
    }

    fn latest_version(&self) -> u32 {
        self.records.iter().map(|r| r.version).max().unwrap_or(0)
    }

    /// Creates the next key version and persists the store.
    pub fn generate(&mut self, now: Timestamp) -> Result<u32, CryptoError> {
        let version = self.latest_version() + 1;
        let (secret, public) = if self.purpose.is_symmetric() {
            (SymmetricKey::generate(version).bytes.to_vec(), None)
        } else {
            let k = PrivateKey::generate(self.purpose, version)?;
            (k.to_der(), Some(B64.encode(k.public_key().to_der())))
        };
        self.records.push(KeyRecord {
            purpose: self.purpose,
            version,
            created_at: now,
            material: seal_material(&self.passphrase, self.purpose, version, &secret),
            retired: false,
            public,
        });
        self.save()?;
        Ok(version)
    }

    pub fn retire_below(&mut self, version: u32) -> Result<(), CryptoError> {
        for r in &mut self.records {
            if r.version < version {
                r.retired = true;
            }
        }
        self.save()
    }

    fn record(&self, version: u32) -> Result<&KeyRecord, CryptoError> {
        self.records
            .iter()
            .find(|r| r.version == version)
            .ok_or(CryptoError::UnknownVersion { purpose: self.purpose, version })
    }

    fn active_version(&self) -> Result<u32, CryptoError> {
        self.current_version().ok_or(CryptoError::NoActiveKey(self.purpose))
    }

    pub fn private_key(&self, version: u32) -> Result<PrivateKey, CryptoError> {
        if self.purpose.is_symmetric() {
            return Err(CryptoError::WrongKeyType(self.purpose));
        }
        let der = open_material(&self.passphrase, self.record(version)?)?;
        PrivateKey::from_der(self.purpose, version, &der)
    }

    pub fn public_key(&self, version: u32) -> Result<PublicKey, CryptoError> {
        let rec = self.record(version)?;
        let public = rec.public.as_ref().ok_or(CryptoError::WrongKeyType(self.purpose))?;
        let der = B64.decode(public).map_err(|_| CryptoError::KeystoreRead("public key is not base64".into()))?;
        PublicKey::from_der(self.purpose, version, &der)
    }

    pub fn symmetric_key(&self, version: u32) -> Result<SymmetricKey, CryptoError> {
        if !self.purpose.is_symmetric() {
            return Err(CryptoError::WrongKeyType(self.purpose));
        }
        let raw = open_material(&self.passphrase, self.record(version)?)?;
        let bytes: [u8; DATA_KEY_LEN] =
            raw.try_into().map_err(|_| CryptoError::KeystoreRead("bad symmetric key length".into()))?;
        Ok(SymmetricKey { version, bytes })
    }

    pub fn current_private_key(&self) -> Result<PrivateKey, CryptoError> {
        self.private_key(self.active_version()?)
    }

    pub fn current_public_key(&self) -> Result<PublicKey, CryptoError> {
        self.public_key(self.active_version()?)
    }

    pub fn current_symmetric_key(&self) -> Result<SymmetricKey, CryptoError> {
        self.symmetric_key(self.active_version()?)
    }

    pub fn save(&self) -> Result<(), CryptoError> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(CryptoError::KeystoreWrite)?;
        }
        let text = serde_json::to_string_pretty(&self.records).expect("key records serialize");
        write_atomic(path, text.as_bytes()).map_err(CryptoError::KeystoreWrite)
    }

    /// Writes the current public half to `<dir>/<purpose>.pub.json`.
    pub fn export_public(&self, dir: &Path) -> Result<PathBuf, CryptoError> {
        let version = self.active_version()?;
        let rec = self.record(version)?;
        let public = rec.public.clone().ok_or(CryptoError::WrongKeyType(self.purpose))?;
        let doc = PublicKeyFile { purpose: self.purpose, version, public };
        std::fs::create_dir_all(dir).map_err(CryptoError::KeystoreWrite)?;
        let path = dir.join(format!("{}.pub.json", self.purpose.as_str()));
        write_atomic(&path, serde_json::to_string_pretty(&doc).unwrap().as_bytes())
            .map_err(CryptoError::KeystoreWrite)?;
        Ok(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PublicKeyFile {
    purpose: Purpose,
    version: u32,
    public: String,
}

/// Loads a public key exported with [`Keystore::export_public`].
pub fn load_public_key(dir: &Path, purpose: Purpose) -> Result<PublicKey, CryptoError> {
    let path = dir.join(format!("{}.pub.json", purpose.as_str()));
    let text = std::fs::read_to_string(&path).map_err(|e| CryptoError::KeystoreRead(format!("{}: {e}", path.display())))?;
    let doc: PublicKeyFile = serde_json::from_str(&text).map_err(|e| CryptoError::KeystoreRead(e.to_string()))?;
    if doc.purpose != purpose {
        return Err(CryptoError::PurposeMismatch { key: doc.purpose, requested: purpose });
    }
    let der = B64.decode(&doc.public).map_err(|_| CryptoError::KeystoreRead("public key is not base64".into()))?;
    PublicKey::from_der(purpose, doc.version, &der)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

/// Anything holding envelopes that a rotation must rewrite.
pub trait EnvelopeStore {
    fn envelope_ids(&self, purpose: Purpose) -> Vec<String>;
    fn envelope(&self, id: &str, purpose: Purpose) -> Option<Envelope>;
    fn replace_envelope(&mut self, id: &str, envelope: Envelope) -> std::io::Result<()>;
    fn flush(&mut self) -> std::io::Result<()>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RotationMarker {
    purpose: Purpose,
    to_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationReport {
    pub new_version: u32,
    pub rewrapped: usize,
}

/// Rotates `keystore` to a new version and re-wraps every envelope of its
/// purpose in `store`. With a `marker` path the operation is resumable: a
/// rerun after a failure targets the same new version and only touches
/// envelopes still on an old one.
pub fn rotate(
    keystore: &mut Keystore,
    store: &mut dyn EnvelopeStore,
    marker: Option<&Path>,
    now: Timestamp,
) -> Result<RotationReport, CryptoError> {
    let purpose = keystore.purpose();
    let pending: Option<RotationMarker> = marker
        .filter(|m| m.exists())
        .and_then(|m| std::fs::read_to_string(m).ok())
        .and_then(|t| serde_json::from_str(&t).ok())
        .filter(|m: &RotationMarker| m.purpose == purpose);
    let new_version = match pending {
        Some(m) => m.to_version,
        None => {
            let v = keystore.generate(now)?;
            if let Some(m) = marker {
                let doc = RotationMarker { purpose, to_version: v };
                write_atomic(m, serde_json::to_string(&doc).unwrap().as_bytes()).map_err(CryptoError::KeystoreWrite)?;
            }
            v
        }
    };

    let (new_pub, new_sym) = if purpose.is_symmetric() {
        (None, Some(keystore.symmetric_key(new_version)?))
    } else {
        (Some(keystore.public_key(new_version)?), None)
    };
    let seal = match (&new_pub, &new_sym) {
        (Some(p), _) => SealKey::Public(p),
        (_, Some(s)) => SealKey::Symmetric(s),
        _ => unreachable!(),
    };

    let mut old_private = std::collections::BTreeMap::new();
    let mut old_sym = std::collections::BTreeMap::new();
    let mut failed = Vec::new();
    let mut rewrapped = 0;
    for id in store.envelope_ids(purpose) {
        let Some(env) = store.envelope(&id, purpose) else {
            failed.push(id);
            continue;
        };
        if env.key_version == new_version {
            continue;
        }
        let v = env.key_version;
        let result = if purpose.is_symmetric() {
            if !old_sym.contains_key(&v) {
                if let Ok(k) = keystore.symmetric_key(v) {
                    old_sym.insert(v, k);
                }
            }
            old_sym
                .get(&v)
                .ok_or(CryptoError::UnknownVersion { purpose, version: v })
                .and_then(|k| rewrap(&env, OpenKey::Symmetric(k), seal))
        } else {
            if !old_private.contains_key(&v) {
                if let Ok(k) = keystore.private_key(v) {
                    old_private.insert(v, k);
                }
            }
            old_private
                .get(&v)
                .ok_or(CryptoError::UnknownVersion { purpose, version: v })
                .and_then(|k| rewrap(&env, OpenKey::Private(k), seal))
        };
        match result.and_then(|e| store.replace_envelope(&id, e).map_err(CryptoError::KeystoreWrite)) {
            Ok(()) => rewrapped += 1,
            Err(_) => failed.push(id),
        }
    }
    store.flush().map_err(CryptoError::KeystoreWrite)?;
    if !failed.is_empty() {
        return Err(CryptoError::PartialRotation { new_version, failed });
    }
    keystore.retire_below(new_version)?;
    if let Some(m) = marker {
        if m.exists() {
            std::fs::remove_file(m).map_err(CryptoError::KeystoreWrite)?;
        }
    }
    Ok(RotationReport { new_version, rewrapped })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::sync::OnceLock;

    pub(crate) fn ring() -> &'static KeyRing {
        static RING: OnceLock<KeyRing> = OnceLock::new();
        RING.get_or_init(|| KeyRing::generate().unwrap())
    }

    #[test]
    fn round_trip_each_purpose() {
        let r = ring();
        let env = encrypt(b"title=ux", &r.m_pub, Purpose::Attributes).unwrap();
        assert_eq!(decrypt(&env, &r.m_pri).unwrap(), b"title=ux");
        let env = encrypt(b"110000", &r.c_pub, Purpose::Compensation).unwrap();
        assert_eq!(decrypt(&env, &r.c_pri).unwrap(), b"110000");
        let env = encrypt(b"count", &r.t_sym, Purpose::Threshold).unwrap();
        assert_eq!(decrypt(&env, &r.t_sym).unwrap(), b"count");
    }

    #[test]
    fn empty_payload() {
        let r = ring();
        let env = encrypt(b"", &r.c_pub, Purpose::Compensation).unwrap();
        assert!(decrypt(&env, &r.c_pri).unwrap().is_empty());
    }

    #[test]
    fn purpose_mismatch_on_encrypt() {
        let r = ring();
        assert!(matches!(
            encrypt(b"x", &r.m_pub, Purpose::Compensation),
            Err(CryptoError::PurposeMismatch { .. })
        ));
        assert!(matches!(encrypt(b"x", &r.t_sym, Purpose::Attributes), Err(CryptoError::PurposeMismatch { .. })));
    }

    #[test]
    fn cross_purpose_decrypt_fails() {
        let r = ring();
        let env = encrypt(b"secret", &r.c_pub, Purpose::Compensation).unwrap();
        assert!(matches!(decrypt(&env, &r.m_pri), Err(CryptoError::AuthFailure)));
        // Even with the header relabelled to the attacker's key.
        let mut forged = env.clone();
        forged.purpose = Purpose::Attributes;
        assert!(matches!(decrypt(&forged, &r.m_pri), Err(CryptoError::AuthFailure)));
    }

    #[test]
    fn tampered_ciphertext_fails() {
        let r = ring();
        let mut env = encrypt(b"secret", &r.c_pub, Purpose::Compensation).unwrap();
        let last = env.ciphertext.len() - 1;
        env.ciphertext[last] ^= 1;
        assert!(matches!(decrypt(&env, &r.c_pri), Err(CryptoError::AuthFailure)));
        let mut env = encrypt(b"secret", &r.t_sym, Purpose::Threshold).unwrap();
        env.wrapped_key[20] ^= 0x80;
        assert!(matches!(decrypt(&env, &r.t_sym), Err(CryptoError::AuthFailure)));
    }

    #[test]
    fn wire_format() {
        let r = ring();
        let env = encrypt(b"abc", &r.t_sym, Purpose::Threshold).unwrap();
        let bytes = env.to_bytes();
        assert_eq!(bytes[0], 3);
        assert_eq!(&bytes[1..5], &1u32.to_be_bytes());
        assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env);
        assert!(Envelope::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Envelope::from_bytes(&extra).is_err());
    }

    #[test]
    fn keystore_versions_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for p in Purpose::ALL {
            let mut ks = Keystore::open(dir.path(), p, "pw").unwrap();
            assert_eq!(ks.generate(Timestamp(0)).unwrap(), 1);
            paths.push(ks.path().unwrap().to_path_buf());
        }
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), 3);

        let ks = Keystore::open(dir.path(), Purpose::Threshold, "pw").unwrap();
        assert!(ks.records()[0].public.is_none());
        assert!(ks.current_symmetric_key().is_ok());
        assert!(ks.current_public_key().is_err());

        let mut ks = Keystore::open(dir.path(), Purpose::Threshold, "pw").unwrap();
        assert_eq!(ks.generate(Timestamp(1)).unwrap(), 2);

        let wrong = Keystore::open(dir.path(), Purpose::Threshold, "not-pw").unwrap();
        assert!(wrong.current_symmetric_key().is_err());

        let text = std::fs::read_to_string(dir.path().join("threshold.keystore.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for k in ["purpose", "version", "created_at", "material", "retired"] {
            assert!(v[0].get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn public_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ks = Keystore::open(&dir.path().join("prep"), Purpose::Compensation, "pw").unwrap();
        ks.generate(Timestamp(0)).unwrap();
        ks.export_public(&dir.path().join("public")).unwrap();
        let pk = load_public_key(&dir.path().join("public"), Purpose::Compensation).unwrap();
        let env = encrypt(b"hi", &pk, Purpose::Compensation).unwrap();
        assert_eq!(decrypt(&env, &ks.current_private_key().unwrap()).unwrap(), b"hi");
        assert!(load_public_key(&dir.path().join("public"), Purpose::Attributes).is_err());
    }

    #[derive(Default)]
    pub(crate) struct MemStore {
        pub items: BTreeMap<String, Envelope>,
        pub poisoned: Option<String>,
    }

    impl EnvelopeStore for MemStore {
        fn envelope_ids(&self, purpose: Purpose) -> Vec<String> {
            self.items.iter().filter(|(_, e)| e.purpose == purpose).map(|(k, _)| k.clone()).collect()
        }
        fn envelope(&self, id: &str, _purpose: Purpose) -> Option<Envelope> {
            self.items.get(id).cloned()
        }
        fn replace_envelope(&mut self, id: &str, envelope: Envelope) -> std::io::Result<()> {
            if self.poisoned.as_deref() == Some(id) {
                return Err(std::io::Error::other("poisoned"));
            }
            self.items.insert(id.to_string(), envelope);
            Ok(())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn rotation_rewraps_everything_of_one_purpose() {
        let mut ks = Keystore::in_memory(Purpose::Threshold, "pw");
        ks.generate(Timestamp(0)).unwrap();
        let k1 = ks.current_symmetric_key().unwrap();
        let r = ring();
        let mut store = MemStore::default();
        for i in 0..100 {
            let env = encrypt(format!("p{i}").as_bytes(), &k1, Purpose::Threshold).unwrap();
            store.items.insert(format!("t{i:03}"), env);
        }
        let comp = encrypt(b"c", &r.c_pub, Purpose::Compensation).unwrap();
        store.items.insert("c".into(), comp.clone());

        let report = rotate(&mut ks, &mut store, None, Timestamp(5)).unwrap();
        assert_eq!(report, RotationReport { new_version: 2, rewrapped: 100 });
        let k2 = ks.current_symmetric_key().unwrap();
        let at_v2 = store.items.values().filter(|e| e.purpose == Purpose::Threshold && e.key_version == 2).count();
        assert_eq!(at_v2, 100);
        assert_eq!(store.items["c"], comp);
        assert_eq!(decrypt(&store.items["t007"], &k2).unwrap(), b"p7");
        assert!(matches!(decrypt(&store.items["t007"], &k1), Err(CryptoError::AuthFailure)));
        assert!(ks.records()[0].retired);
    }

    #[test]
    fn rotation_of_empty_store() {
        let mut ks = Keystore::in_memory(Purpose::Threshold, "pw");
        ks.generate(Timestamp(0)).unwrap();
        let mut store = MemStore::default();
        let report = rotate(&mut ks, &mut store, None, Timestamp(1)).unwrap();
        assert_eq!(report.rewrapped, 0);
    }

    #[test]
    fn rotation_resumes_after_partial_failure() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("rotation.marker");
        let mut ks = Keystore::in_memory(Purpose::Threshold, "pw");
        ks.generate(Timestamp(0)).unwrap();
        let k1 = ks.current_symmetric_key().unwrap();
        let mut store = MemStore::default();
        for i in 0..5 {
            store.items.insert(format!("t{i}"), encrypt(b"x", &k1, Purpose::Threshold).unwrap());
        }
        store.poisoned = Some("t3".into());
        match rotate(&mut ks, &mut store, Some(&marker), Timestamp(1)) {
            Err(CryptoError::PartialRotation { new_version, failed }) => {
                assert_eq!(new_version, 2);
                assert_eq!(failed, vec!["t3".to_string()]);
            }
            other => panic!("expected partial rotation, got {other:?}"),
        }
        assert!(marker.exists());
        store.poisoned = None;
        let report = rotate(&mut ks, &mut store, Some(&marker), Timestamp(2)).unwrap();
        assert_eq!(report, RotationReport { new_version: 2, rewrapped: 1 });
        assert!(!marker.exists());
        assert!(store.items.values().all(|e| e.key_version == 2));
    }

    #[test]
    fn asymmetric_rotation() {
        let mut ks = Keystore::in_memory(Purpose::Attributes, "pw");
        ks.generate(Timestamp(0)).unwrap();
        let pk1 = ks.current_public_key().unwrap();
        let mut store = MemStore::default();
        store.items.insert("a".into(), encrypt(b"attrs", &pk1, Purpose::Attributes).unwrap());
        rotate(&mut ks, &mut store, None, Timestamp(1)).unwrap();
        let sk2 = ks.current_private_key().unwrap();
        assert_eq!(sk2.version, 2);
        assert_eq!(decrypt(&store.items["a"], &sk2).unwrap(), b"attrs");
        let sk1 = ks.private_key(1).unwrap();
        assert!(matches!(decrypt(&store.items["a"], &sk1), Err(CryptoError::AuthFailure)));
    }

    #[test]
    fn key_material_is_distinct() {
        let r = ring();
        assert_ne!(r.m_pub, r.c_pub);
        assert!(!r.m_pri.material_eq(&r.c_pri));
    }
}
