use serde::{Deserialize, Serialize};

use crate::wire::{Mode, MsgType};

/// What a client-to-server message discloses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    PlainActivation,
    EncryptedActivation,
    OutputGradient,
    WeightGradient,
    PublicKey,
    SecretKey,
    Labels,
    Predictions,
    MaskedWeights,
    Control,
}

/// Contents of a client-to-server message of the given type. `GRAD_AL`
/// carries the weight gradient only when the leaky debug switch is on.
pub fn contents(msg_type: MsgType, with_grad_w: bool) -> Vec<Content> {
    match msg_type {
        MsgType::PlainAct => vec![Content::PlainActivation],
        MsgType::EncAct => vec![Content::EncryptedActivation],
        MsgType::GradAl if with_grad_w => vec![Content::OutputGradient, Content::WeightGradient],
        MsgType::GradAl => vec![Content::OutputGradient],
        MsgType::CtxPub => vec![Content::PublicKey],
        MsgType::DecW => vec![Content::MaskedWeights],
        _ => vec![Content::Control],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditAssertion {
    pub id: String,
    pub statement: String,
    pub holds: bool,
    /// Set when a violation is inherent to the mode rather than a leak.
    pub exposed_by_design: bool,
}

/// Which sensitive values reached the server, derived from every message
/// the client sent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub mode: Mode,
    pub messages_inspected: usize,
    pub assertions: Vec<AuditAssertion>,
}

impl LeakageAudit {
    pub fn from_sent(mode: Mode, sent: &[(MsgType, Vec<Content>)]) -> Self {
        let has = |c: Content| sent.iter().any(|(_, cs)| cs.contains(&c));
        let plain_mode = mode == Mode::Plain;
        let assertions = vec![
            AuditAssertion {
                id: "i".into(),
                statement: "server never receives the plaintext split activation a^(l)".into(),
                holds: !has(Content::PlainActivation),
                exposed_by_design: plain_mode,
            },
            AuditAssertion {
                id: "ii".into(),
                statement: "server never receives the weight gradient dJ/dW^(L)".into(),
                holds: !has(Content::WeightGradient),
                exposed_by_design: false,
            },
            AuditAssertion {
                id: "iii".into(),
                statement: "server never receives the secret key".into(),
                holds: !has(Content::SecretKey),
                exposed_by_design: false,
            },
            AuditAssertion {
                id: "iv".into(),
                statement: "server never receives labels y or predictions y_hat".into(),
                holds: !has(Content::Labels) && !has(Content::Predictions),
                exposed_by_design: false,
            },
        ];
        Self { mode, messages_inspected: sent.len(), assertions }
    }

    pub fn assertion(&self, id: &str) -> Option<&AuditAssertion> {
        self.assertions.iter().find(|a| a.id == id)
    }

    /// True when every assertion holds.
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.holds)
    }

    /// The inversion attack needs both `∂J/∂a^(L)` and `∂J/∂W^(L)` in the clear.
    pub fn inversion_attack_possible(&self) -> bool {
        !self.assertion("ii").is_some_and(|a| a.holds)
    }
}
