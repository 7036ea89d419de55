use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Hyperparams;
use crate::error::{Error, Result};

/// Model variants compared in ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    #[default]
    Full,
    VisualProtoOnly,
    SemanticProtoOnly,
    NoPropagation,
    VisualPropOnly,
    SemanticPropOnly,
    SharedAttentionVisual,
    SharedAttentionSemantic,
    NoConsistency,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::VisualProtoOnly,
        AblationVariant::SemanticProtoOnly,
        AblationVariant::NoPropagation,
        AblationVariant::VisualPropOnly,
        AblationVariant::SemanticPropOnly,
        AblationVariant::SharedAttentionVisual,
        AblationVariant::SharedAttentionSemantic,
        AblationVariant::NoConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::VisualProtoOnly => "visual-proto-only",
            AblationVariant::SemanticProtoOnly => "semantic-proto-only",
            AblationVariant::NoPropagation => "no-propagation",
            AblationVariant::VisualPropOnly => "visual-prop-only",
            AblationVariant::SemanticPropOnly => "semantic-prop-only",
            AblationVariant::SharedAttentionVisual => "shared-attention-visual",
            AblationVariant::SharedAttentionSemantic => "shared-attention-semantic",
            AblationVariant::NoConsistency => "no-consistency",
        }
    }

    /// Comparison group used when tabulating ablations.
    pub fn group(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::VisualProtoOnly | AblationVariant::SemanticProtoOnly => "prototype",
            AblationVariant::NoPropagation
            | AblationVariant::VisualPropOnly
            | AblationVariant::SemanticPropOnly => "propagation",
            AblationVariant::SharedAttentionVisual | AblationVariant::SharedAttentionSemantic => {
                "attention"
            }
            AblationVariant::NoConsistency => "consistency",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Which attention transform a space uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadChoice {
    Visual,
    Semantic,
}

/// Which final prototypes the classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierInput {
    Fused,
    Visual,
    Semantic,
}

/// Concrete model configuration after applying a variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wiring {
    pub steps: usize,
    pub propagate_visual: bool,
    pub propagate_semantic: bool,
    pub visual_head: HeadChoice,
    pub semantic_head: HeadChoice,
    pub classifier_input: ClassifierInput,
    pub consistency_weight: f64,
}

impl Wiring {
    /// Prototype width `p` that the classifier's `W2` consumes.
    pub fn proto_width(&self, d: usize) -> usize {
        match self.classifier_input {
            ClassifierInput::Fused => 2 * d,
            _ => d,
        }
    }
}

pub fn apply_variant(variant: AblationVariant, hp: &Hyperparams) -> Wiring {
    let mut w = Wiring {
        steps: hp.steps,
        propagate_visual: true,
        propagate_semantic: true,
        visual_head: HeadChoice::Visual,
        semantic_head: HeadChoice::Semantic,
        classifier_input: ClassifierInput::Fused,
        consistency_weight: hp.consistency_weight,
    };
    match variant {
        AblationVariant::Full => {}
        AblationVariant::VisualProtoOnly => w.classifier_input = ClassifierInput::Visual,
        AblationVariant::SemanticProtoOnly => w.classifier_input = ClassifierInput::Semantic,
        AblationVariant::NoPropagation => w.steps = 0,
        AblationVariant::VisualPropOnly => w.propagate_semantic = false,
        AblationVariant::SemanticPropOnly => w.propagate_visual = false,
        AblationVariant::SharedAttentionVisual => w.semantic_head = HeadChoice::Visual,
        AblationVariant::SharedAttentionSemantic => w.visual_head = HeadChoice::Semantic,
        AblationVariant::NoConsistency => w.consistency_weight = 0.0,
    }
    w
}
