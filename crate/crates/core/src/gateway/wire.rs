//! Line-delimited JSON messages exchanged with an external model process.
//!
//! ```text
//! model → gateway (first line): {"protocol":1,"classes":C,"modalities":[{"kind":"dense"},{"kind":"tokens"}]}
//! gateway → model:              {"id":k,"pairs":[[x1,x2],...]}
//! model → gateway:              {"id":k,"logits":[[C reals],...]}
//! ```
//!
//! Responses must arrive in request order with matching ids.

use serde::{Deserialize, Serialize};

use super::{ModalityKind, ModalityValue};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub classes: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl Handshake {
    pub fn new(classes: usize, kinds: [ModalityKind; 2]) -> Self {
        Self {
            protocol: PROTOCOL_VERSION,
            classes,
            modalities: kinds.iter().map(|&kind| ModalitySpec { kind }).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestRef<'a> {
    pub id: u64,
    pub pairs: Vec<(&'a ModalityValue, &'a ModalityValue)>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Request {
    pub id: u64,
    pub pairs: Vec<(ModalityValue, ModalityValue)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub logits: Vec<Vec<f64>>,
}
