//! JSON parameter checkpoints: shape-annotated flat arrays per named
//! parameter plus frozen flags. Loading validates shapes and finiteness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::AssociationMap;
use crate::nethead::{CosineClassifier, DualHead, LinearLayer, Matrix, NetError};
use crate::pipeline::{PretrainedHead, TfaHead};

pub const CHECKPOINT_FORMAT: &str = "fadi-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format {0:?}")]
    BadFormat(String),
    #[error("checkpoint kind {got:?}, expected {want:?}")]
    WrongKind { got: String, want: String },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint is missing its association map")]
    MissingAssociation,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// One named tensor with its shape and frozen flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: [usize; 2],
    pub frozen: bool,
    pub data: Vec<f64>,
}

impl NamedParam {
    fn new(name: &str, m: &Matrix, frozen: bool) -> NamedParam {
        NamedParam {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            frozen,
            data: m.data().to_vec(),
        }
    }

    fn matrix(&self) -> Result<Matrix, CheckpointError> {
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone())?)
    }
}

/// A stage checkpoint: metadata plus named parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub class_names: Vec<String>,
    pub num_base: usize,
    pub num_novel: usize,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub association: Option<AssociationMap>,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::BadFormat(ckpt.format));
        }
        Ok(ckpt)
    }

    fn expect_kind(&self, want: &str) -> Result<(), CheckpointError> {
        if self.kind != want {
            return Err(CheckpointError::WrongKind { got: self.kind.clone(), want: want.into() });
        }
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&NamedParam, CheckpointError> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))
    }

    fn linear(&self, prefix: &str) -> Result<LinearLayer, CheckpointError> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let mut layer = LinearLayer::new(w.matrix()?, b.matrix()?)?;
        layer.frozen = w.frozen;
        Ok(layer)
    }

    fn classifier(&self, name: &str) -> Result<CosineClassifier, CheckpointError> {
        let w = self.param(name)?;
        let mut cls = CosineClassifier::new(w.matrix()?, self.tau)?;
        cls.frozen = w.frozen;
        Ok(cls)
    }

    pub fn from_pretrained(head: &PretrainedHead) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: "base".into(),
            class_names: head.class_names.clone(),
            num_base: head.num_base,
            num_novel: head.num_novel,
            tau: head.classifier.tau,
            association: None,
            params: vec![
                NamedParam::new("g.weight", &head.g.weight, head.g.frozen),
                NamedParam::new("g.bias", &head.g.bias, head.g.frozen),
                NamedParam::new("classifier.weight", &head.classifier.weight, false),
            ],
        }
    }

    pub fn to_pretrained(&self) -> Result<PretrainedHead, CheckpointError> {
        self.expect_kind("base")?;
        Ok(PretrainedHead {
            g: self.linear("g")?,
            classifier: self.classifier("classifier.weight")?,
            class_names: self.class_names.clone(),
            num_base: self.num_base,
            num_novel: self.num_novel,
        })
    }

    pub fn from_association(
        pre: &PretrainedHead,
        w_asso: &LinearLayer,
        map: &AssociationMap,
    ) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: "assoc".into(),
            class_names: pre.class_names.clone(),
            num_base: pre.num_base,
            num_novel: pre.num_novel,
            tau: pre.classifier.tau,
            association: Some(map.clone()),
            params: vec![
                NamedParam::new("g_assoc.weight", &w_asso.weight, true),
                NamedParam::new("g_assoc.bias", &w_asso.bias, true),
            ],
        }
    }

    pub fn to_association(&self) -> Result<(LinearLayer, AssociationMap), CheckpointError> {
        self.expect_kind("assoc")?;
        let mut layer = self.linear("g_assoc")?;
        layer.frozen = true;
        let map = self.association.clone().ok_or(CheckpointError::MissingAssociation)?;
        Ok((layer, map))
    }

    pub fn from_dual(
        head: &DualHead,
        regressor: Option<&LinearLayer>,
        class_names: &[String],
        map: &AssociationMap,
    ) -> Checkpoint {
        let num_base = head.cls_base.num_classes();
        let num_novel = head.cls_novel.num_classes() - 1;
        let mut params = vec![
            NamedParam::new("g_base.weight", &head.g_base.weight, true),
            NamedParam::new("g_base.bias", &head.g_base.bias, true),
            NamedParam::new("g_novel.weight", &head.g_novel.weight, true),
            NamedParam::new("g_novel.bias", &head.g_novel.bias, true),
            NamedParam::new("cls_base.weight", &head.cls_base.weight, false),
            NamedParam::new("cls_novel.weight", &head.cls_novel.weight, false),
        ];
        if let Some(reg) = regressor {
            params.push(NamedParam::new("regressor.weight", &reg.weight, false));
            params.push(NamedParam::new("regressor.bias", &reg.bias, false));
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: "dual".into(),
            class_names: class_names.to_vec(),
            num_base,
            num_novel,
            tau: head.cls_base.tau,
            association: Some(map.clone()),
            params,
        }
    }

    pub fn to_dual(&self) -> Result<(DualHead, Option<LinearLayer>), CheckpointError> {
        self.expect_kind("dual")?;
        let mut g_base = self.linear("g_base")?;
        let mut g_novel = self.linear("g_novel")?;
        g_base.frozen = true;
        g_novel.frozen = true;
        let head = DualHead::new(
            g_base,
            g_novel,
            self.classifier("cls_base.weight")?,
            self.classifier("cls_novel.weight")?,
        )?;
        let regressor = if self.params.iter().any(|p| p.name == "regressor.weight") {
            Some(self.linear("regressor")?)
        } else {
            None
        };
        Ok((head, regressor))
    }

    pub fn from_tfa(head: &TfaHead) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: "tfa".into(),
            class_names: head.class_names.clone(),
            num_base: head.num_base,
            num_novel: head.num_novel,
            tau: head.classifier.tau,
            association: None,
            params: vec![
                NamedParam::new("g.weight", &head.g.weight, true),
                NamedParam::new("g.bias", &head.g.bias, true),
                NamedParam::new("classifier.weight", &head.classifier.weight, false),
            ],
        }
    }

    pub fn to_tfa(&self) -> Result<TfaHead, CheckpointError> {
        self.expect_kind("tfa")?;
        let mut g = self.linear("g")?;
        g.frozen = true;
        Ok(TfaHead {
            g,
            classifier: self.classifier("classifier.weight")?,
            class_names: self.class_names.clone(),
            num_base: self.num_base,
            num_novel: self.num_novel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> PretrainedHead {
        let g = LinearLayer::new(
            Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            Matrix::from_vec(2, 1, vec![0.01, -0.02]).unwrap(),
        )
        .unwrap();
        let cls =
            CosineClassifier::new(Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap(), 20.0)
                .unwrap();
        PretrainedHead {
            g,
            classifier: cls,
            class_names: vec!["base0".into(), "base1".into(), "novel0".into(), "background".into()],
            num_base: 2,
            num_novel: 1,
        }
    }

    #[test]
    fn pretrained_roundtrip() {
        let h = head();
        let json = Checkpoint::from_pretrained(&h).to_json();
        let back = Checkpoint::from_json(&json).unwrap().to_pretrained().unwrap();
        assert_eq!(back.g, h.g);
        assert_eq!(back.classifier.weight, h.classifier.weight);
        assert_eq!(back.class_names, h.class_names);
    }

    #[test]
    fn bad_format_and_shape_are_rejected() {
        let h = head();
        let mut ckpt = Checkpoint::from_pretrained(&h);
        ckpt.format = "something-else".into();
        assert!(matches!(
            Checkpoint::from_json(&ckpt.to_json()).unwrap_err(),
            CheckpointError::BadFormat(_)
        ));

        let mut ckpt = Checkpoint::from_pretrained(&h);
        ckpt.params[0].shape = [3, 3];
        assert!(ckpt.to_pretrained().is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let ckpt = Checkpoint::from_pretrained(&head());
        assert!(matches!(
            ckpt.to_association().unwrap_err(),
            CheckpointError::WrongKind { .. }
        ));
    }
}
