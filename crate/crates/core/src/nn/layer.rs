use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Affine,
    Relu,
    SigmoidHead,
    SoftmaxHead,
    Batchnorm,
    Dropout,
}

impl LayerKind {
    pub fn is_head(self) -> bool {
        matches!(self, LayerKind::SigmoidHead | LayerKind::SoftmaxHead)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            LayerKind::Affine => 1,
            LayerKind::Relu => 2,
            LayerKind::SigmoidHead => 3,
            LayerKind::SoftmaxHead => 4,
            LayerKind::Batchnorm => 5,
            LayerKind::Dropout => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Affine, in_dim, out_dim, dropout_rate: 0.0 }
    }

    pub fn relu(dim: usize) -> Self {
        Self::same(LayerKind::Relu, dim)
    }

    pub fn batchnorm(dim: usize) -> Self {
        Self::same(LayerKind::Batchnorm, dim)
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        Self { kind: LayerKind::Dropout, in_dim: dim, out_dim: dim, dropout_rate: rate }
    }

    pub fn sigmoid_head() -> Self {
        Self::same(LayerKind::SigmoidHead, 1)
    }

    pub fn softmax_head(classes: usize) -> Self {
        Self::same(LayerKind::SoftmaxHead, classes)
    }

    fn same(kind: LayerKind, dim: usize) -> Self {
        Self { kind, in_dim: dim, out_dim: dim, dropout_rate: 0.0 }
    }
}

/// Checks dimension chaining, head placement and per-kind constraints.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
    let Some(last) = specs.last() else {
        return Err(NnError::InvalidSpec("empty layer stack".into()));
    };
    if !last.kind.is_head() {
        return Err(NnError::InvalidSpec("last layer must be a head".into()));
    }
    if specs.iter().filter(|s| s.kind.is_head()).count() != 1 {
        return Err(NnError::InvalidSpec("exactly one head layer is allowed".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NnError::InvalidSpec(format!("layer {i} has a zero dimension")));
        }
        if s.kind != LayerKind::Affine && s.in_dim != s.out_dim {
            return Err(NnError::InvalidSpec(format!(
                "layer {i} ({:?}) must preserve its width",
                s.kind
            )));
        }
        match s.kind {
            LayerKind::SigmoidHead if s.out_dim != 1 => {
                return Err(NnError::InvalidSpec("sigmoid head requires out_dim == 1".into()))
            }
            LayerKind::SoftmaxHead if s.out_dim < 2 => {
                return Err(NnError::InvalidSpec("softmax head requires out_dim >= 2".into()))
            }
            LayerKind::Dropout if !(0.0..1.0).contains(&s.dropout_rate) => {
                return Err(NnError::InvalidSpec(format!(
                    "dropout rate {} outside [0, 1)",
                    s.dropout_rate
                )))
            }
            _ => {}
        }
        if let Some(next) = specs.get(i + 1) {
            if next.in_dim != s.out_dim {
                return Err(NnError::InvalidSpec(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    s.out_dim,
                    i + 1,
                    next.in_dim
                )));
            }
        }
    }
    Ok(())
}

/// `in_dim → 32 relu → 32 relu → head`.
///
/// Two classes get a single-logit sigmoid head, more get a softmax head.
pub fn default_mlp(in_dim: usize, num_classes: usize) -> Vec<LayerSpec> {
    let head_width = if num_classes <= 2 { 1 } else { num_classes };
    let head = if num_classes <= 2 {
        LayerSpec::sigmoid_head()
    } else {
        LayerSpec::softmax_head(num_classes)
    };
    vec![
        LayerSpec::affine(in_dim, 32),
        LayerSpec::relu(32),
        LayerSpec::affine(32, 32),
        LayerSpec::relu(32),
        LayerSpec::affine(32, head_width),
        head,
    ]
}

/// 64-bit FNV-1a over a canonical encoding of the layer stack.
pub(crate) fn architecture_hash(specs: &[LayerSpec]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&(specs.len() as u32).to_le_bytes());
    for s in specs {
        feed(&[s.kind.tag()]);
        feed(&(s.in_dim as u32).to_le_bytes());
        feed(&(s.out_dim as u32).to_le_bytes());
        feed(&s.dropout_rate.to_bits().to_le_bytes());
    }
    h
}
