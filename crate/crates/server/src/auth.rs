//! Static bearer tokens for the two roles.

use std::collections::{HashMap, HashSet};

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::HeaderMap;
use carelink_core::domain::PatientId;

use crate::error::ApiError;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Provider,
    Patient(PatientId),
}

impl Principal {
    pub fn require_provider(&self) -> Result<(), ApiError> {
        match self {
            Principal::Provider => Ok(()),
            Principal::Patient(_) => Err(ApiError::forbidden("provider role required")),
        }
    }

    /// Providers see every patient; a patient sees only themself.
    pub fn require_access(&self, patient: &PatientId) -> Result<(), ApiError> {
        match self {
            Principal::Provider => Ok(()),
            Principal::Patient(own) if own == patient => Ok(()),
            Principal::Patient(_) => Err(ApiError::forbidden("patients may only access their own records")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuthConfig {
    provider_tokens: HashSet<String>,
    patient_tokens: HashMap<String, PatientId>,
}

impl AuthConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_provider_token(mut self, token: impl Into<String>) -> Self {
        self.provider_tokens.insert(token.into());
        self
    }

    pub fn with_patient_token(mut self, token: impl Into<String>, patient: impl Into<PatientId>) -> Self {
        self.patient_tokens.insert(token.into(), patient.into());
        self
    }

    /// `PROVIDER_TOKEN` (comma-separated) and `PATIENT_TOKENS`
    /// (`token:patient_id,...`).
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var("PROVIDER_TOKEN") {
            for t in v.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                cfg.provider_tokens.insert(t.to_owned());
            }
        }
        if let Ok(v) = std::env::var("PATIENT_TOKENS") {
            cfg.patient_tokens = parse_patient_tokens(&v)?;
        }
        if cfg.provider_tokens.is_empty() {
            return Err("PROVIDER_TOKEN is not set".into());
        }
        Ok(cfg)
    }

    pub fn resolve(&self, token: &str) -> Option<Principal> {
        if self.provider_tokens.contains(token) {
            return Some(Principal::Provider);
        }
        self.patient_tokens.get(token).cloned().map(Principal::Patient)
    }
}

pub fn parse_patient_tokens(spec: &str) -> Result<HashMap<String, PatientId>, String> {
    spec.split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|entry| match entry.split_once(':') {
            Some((token, patient)) if !token.is_empty() && !patient.is_empty() => {
                Ok((token.to_owned(), PatientId::new(patient)))
            }
            _ => Err(format!("malformed PATIENT_TOKENS entry `{entry}`")),
        })
        .collect()
}

pub fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

impl FromRequestParts<AppState> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        bearer(&parts.headers).and_then(|t| state.auth.resolve(t)).ok_or_else(ApiError::unauthorized)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patient_token_list() {
        let m = parse_patient_tokens("a:patient-john, b:patient-mary").unwrap();
        assert_eq!(m["b"], PatientId::new("patient-mary"));
        assert!(parse_patient_tokens("broken").is_err());
    }
}
