//! The 7-level network layout: channel widths, residual-unit wiring and
//! parameter shapes.
//!
//! Levels 1-3 encode (each first conv strided except level 1), level 4 is
//! the bridge, levels 5-7 decode. Before each decoder unit the lower level's
//! output is upsampled 2x and concatenated with the matching encoder output
//! (1<->7, 2<->6, 3<->5). A 1x1 convolution plus sigmoid head maps the last
//! level to a single probability channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::params::{validate_against, ParamStore, StoreMeta};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Base channel widths per level before width scaling.
pub const BASE_WIDTHS: [usize; 7] = [64, 128, 256, 512, 256, 128, 64];

/// Structure of a single residual unit: two 3x3 conv blocks plus a shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualUnitSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of the first convolution (2 for the downsampling units).
    pub first_stride: usize,
    /// Whether the unit opens with BN+ReLU. False only for level 1, which
    /// convolves the raw input directly.
    pub preactivate_first: bool,
}

impl ResidualUnitSpec {
    /// The shortcut is the identity only when the unit preserves shape;
    /// otherwise it is a strided 1x1 projection.
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.first_stride != 1
    }
}

/// A unit's spec plus the parameter names it reads from the store.
#[derive(Debug, Clone)]
pub struct UnitWiring {
    pub spec: ResidualUnitSpec,
    /// BN prefix before the first conv; `None` when not preactivated.
    pub bn_a: Option<String>,
    pub conv_a: String,
    pub bn_b: String,
    pub conv_b: String,
    /// Projection kernel name; `None` when the shortcut is the identity.
    pub proj: Option<String>,
}

impl UnitWiring {
    /// Wiring for a standalone unit with parameter names under `prefix`
    /// (used by unit-level tests and checks outside the 7-level graph).
    pub fn standalone(prefix: &str, spec: ResidualUnitSpec) -> Self {
        UnitWiring {
            bn_a: spec.preactivate_first.then(|| format!("{prefix}.bn_a")),
            conv_a: format!("{prefix}.conv_a"),
            bn_b: format!("{prefix}.bn_b"),
            conv_b: format!("{prefix}.conv_b"),
            proj: spec.needs_projection().then(|| format!("{prefix}.proj")),
            spec,
        }
    }

    /// Parameter names and shapes in deterministic order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        let (ci, co) = (self.spec.in_channels, self.spec.out_channels);
        if let Some(bn) = &self.bn_a {
            push_bn_shapes(&mut out, bn, ci);
        }
        out.push((format!("{}.kernel", self.conv_a), [co, ci, 3, 3]));
        push_bn_shapes(&mut out, &self.bn_b, co);
        out.push((format!("{}.kernel", self.conv_b), [co, co, 3, 3]));
        if let Some(proj) = &self.proj {
            out.push((format!("{proj}.kernel"), [co, ci, 1, 1]));
        }
        out
    }
}

fn push_bn_shapes(out: &mut Vec<(String, [usize; 4])>, prefix: &str, channels: usize) {
    for field in ["gamma", "beta", "running_mean", "running_var"] {
        out.push((format!("{prefix}.{field}"), [1, channels, 1, 1]));
    }
}

/// The complete network layout for a given width scale.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub width_scale: f64,
    pub widths: [usize; 7],
    pub input_channels: usize,
}

impl ModelGraph {
    /// `width_scale` multiplies every level width (minimum 1 channel);
    /// 1.0 reproduces the full-size network.
    pub fn new(width_scale: f64) -> Self {
        let mut widths = [0usize; 7];
        for (w, base) in widths.iter_mut().zip(BASE_WIDTHS) {
            *w = ((base as f64 * width_scale).round() as usize).max(1);
        }
        ModelGraph {
            width_scale,
            widths,
            input_channels: 3,
        }
    }

    /// Input channel count of each unit. Decoder units see the upsampled
    /// lower level concatenated with the paired encoder output.
    pub fn unit_in_channels(&self, level: usize) -> usize {
        let w = &self.widths;
        match level {
            0 => self.input_channels,
            1..=3 => w[level - 1],
            4 => w[3] + w[2],
            5 => w[4] + w[1],
            6 => w[5] + w[0],
            _ => unreachable!("levels are 0..7"),
        }
    }

    pub fn units(&self) -> Vec<UnitWiring> {
        (0..7)
            .map(|level| {
                let spec = ResidualUnitSpec {
                    in_channels: self.unit_in_channels(level),
                    out_channels: self.widths[level],
                    first_stride: if (1..=3).contains(&level) { 2 } else { 1 },
                    preactivate_first: level != 0,
                };
                let conv_a = 2 * level + 1;
                let conv_b = 2 * level + 2;
                UnitWiring {
                    bn_a: spec.preactivate_first.then(|| format!("bn{conv_a}")),
                    conv_a: format!("conv{conv_a}"),
                    bn_b: format!("bn{conv_b}"),
                    conv_b: format!("conv{conv_b}"),
                    proj: spec
                        .needs_projection()
                        .then(|| format!("proj{}", level + 1)),
                    spec,
                }
            })
            .collect()
    }

    pub fn head_kernel_name(&self) -> &'static str {
        "conv15.kernel"
    }

    /// Every parameter name and shape, in store order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        for unit in self.units() {
            out.extend(unit.param_shapes());
        }
        out.push((
            self.head_kernel_name().to_string(),
            [1, self.widths[6], 1, 1],
        ));
        out
    }

    /// Fresh parameters: conv kernels are He-normal
    /// (std = sqrt(2 / (C_in * kH * kW))), BN scale 1 / shift 0, running
    /// mean 0 / variance 1. Deterministic for a fixed seed.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(StoreMeta::with_width_scale(self.width_scale));
        for (name, shape) in self.param_shapes() {
            let tensor = if name.ends_with(".kernel") {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        S::from_f64(z * std)
                    })
                    .collect();
                Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::filled(shape, S::one())
            } else {
                Tensor::zeros(shape)
            };
            store.insert(name, tensor);
        }
        store
    }

    /// Checks a (possibly loaded) store against this graph's expected
    /// tensor names and shapes.
    pub fn validate_store<S: Scalar>(&self, store: &ParamStore<S>) -> Result<()> {
        validate_against(store, &self.param_shapes())
    }

    /// Closed-form learnable parameter count (kernels + BN gamma/beta).
    pub fn expected_learnable_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(name, _)| super::params::is_learnable(name))
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}
