//! Intake: validate, snapshot canonical attributes, encrypt both halves under
//! separate keys, append to the write-only store, record recency, and hand
//! back the attribute-only change event.

use std::sync::Arc;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{encrypt, CryptoError, PublicKey, Purpose};
use crate::model::{CanonicalProfile, CompensationData, CurrencyTable, MemberProfile, Money, ModelError, Timestamp};
use crate::slicing::ChangeEvent;
use crate::standardize::{StandardizeError, Standardizer};
use crate::store::{ResubmissionPolicy, SubmissionRecord, SubmissionWriter, VerificationStore};

/// Base salary bounds, in major currency units per year.
pub const MIN_BASE_SALARY_UNITS: Money = 1_000;
pub const MAX_BASE_SALARY_UNITS: Money = 10_000_000;

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("member already submitted within the resubmission window")]
    ResubmissionDenied,
    #[error(transparent)]
    Unmappable(StandardizeError),
    #[error("encryption failed: {0}")]
    Crypto(#[from] CryptoError),
    #[error("submission store write failed: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for SubmitError {
    fn from(e: ModelError) -> Self {
        SubmitError::Validation(e.to_string())
    }
}

/// Plaintext of the attribute envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSnapshot {
    pub profile: CanonicalProfile,
    pub local_currency: String,
    pub exchange_rate: f64,
}

/// Plaintext of the compensation envelope. The rate is duplicated here so
/// the preparation path can convert without the attribute key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationPayload {
    pub compensation: CompensationData,
    pub local_currency: String,
    pub exchange_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitReceipt {
    pub submission_id: String,
    pub event: ChangeEvent,
}

pub fn new_submission_id() -> String {
    let mut id = [0u8; 16];
    OsRng.fill_bytes(&mut id);
    hex::encode(id)
}

pub struct SubmissionService {
    standardizer: Arc<Standardizer>,
    currencies: CurrencyTable,
    m_pub: PublicKey,
    c_pub: PublicKey,
    writer: SubmissionWriter,
    verification: VerificationStore,
    policy: ResubmissionPolicy,
}

impl SubmissionService {
    pub fn new(
        standardizer: Arc<Standardizer>,
        currencies: CurrencyTable,
        m_pub: PublicKey,
        c_pub: PublicKey,
        writer: SubmissionWriter,
        verification: VerificationStore,
        policy: ResubmissionPolicy,
    ) -> Self {
        SubmissionService { standardizer, currencies, m_pub, c_pub, writer, verification, policy }
    }

    pub fn policy(&self) -> &ResubmissionPolicy {
        &self.policy
    }

    pub fn verification(&self) -> &VerificationStore {
        &self.verification
    }

    fn validate(&self, member: &MemberProfile, comp: &CompensationData) -> Result<(String, f64), SubmitError> {
        comp.validate(&self.currencies)?;
        let units = comp.base_salary / 100;
        if !(MIN_BASE_SALARY_UNITS..=MAX_BASE_SALARY_UNITS).contains(&units) {
            return Err(SubmitError::Validation(format!(
                "base salary {units} outside [{MIN_BASE_SALARY_UNITS}, {MAX_BASE_SALARY_UNITS}]"
            )));
        }
        let country = member.country.trim().to_uppercase();
        let local = self
            .currencies
            .local_currency(&country)
            .ok_or_else(|| SubmitError::Validation(format!("no currency configured for country `{country}`")))?
            .to_string();
        let rate = self.currencies.rate(&comp.currency, &local)?;
        Ok((local, rate))
    }

    pub fn can_resubmit(&self, member_id: &str, now: Timestamp) -> bool {
        self.verification.can_resubmit(member_id, now, &self.policy)
    }

    pub fn has_submitted_within(&self, member_id: &str, window: i64, now: Timestamp) -> bool {
        self.verification.has_submitted_within(member_id, window, now)
    }

    pub fn submit(&self, member: &MemberProfile, comp: &CompensationData, now: Timestamp) -> Result<SubmitReceipt, SubmitError> {
        let (local_currency, exchange_rate) = self.validate(member, comp)?;
        let profile = self.standardizer.canonicalize(member).map_err(SubmitError::Unmappable)?;

        let previous = self.verification.get(&member.member_id).map(|r| r.last_submission_at);
        if !self.verification.try_record(&member.member_id, now, &self.policy) {
            return Err(SubmitError::ResubmissionDenied);
        }

        let result = (|| {
            let snapshot = AttributeSnapshot { profile: profile.clone(), local_currency: local_currency.clone(), exchange_rate };
            let payload = CompensationPayload { compensation: comp.clone(), local_currency, exchange_rate };
            let attr_envelope = encrypt(&serde_json::to_vec(&snapshot).unwrap(), &self.m_pub, Purpose::Attributes)?;
            let comp_envelope = encrypt(&serde_json::to_vec(&payload).unwrap(), &self.c_pub, Purpose::Compensation)?;
            let submission_id = new_submission_id();
            self.writer.append(SubmissionRecord {
                submission_id: submission_id.clone(),
                attr_envelope,
                comp_envelope,
                true_timestamp: now,
            })?;
            Ok::<_, SubmitError>(submission_id)
        })();

        match result {
            Ok(submission_id) => Ok(SubmitReceipt {
                event: ChangeEvent { submission_id: submission_id.clone(), attributes: profile.attributes(), true_timestamp: now },
                submission_id,
            }),
            Err(e) => {
                self.verification.restore(&member.member_id, previous);
                Err(e)
            }
        }
    }
}
