//! Architecture configuration files and the named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::frontends::{BandedConvConfig, FrontendSpec, GridRnnConfig};
use crate::kernels::KernelKind;
use crate::tdnn::{default_tree_pairing, TdnnSpec, WindowGeometry};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdnnSection {
    /// Kernel kinds, kernel 1 first.
    pub kernels: Vec<KernelKind>,
    pub width: usize,
    #[serde(default = "default_tree_pairing")]
    pub tree_pairing: Vec<Vec<[usize; 2]>>,
    #[serde(default)]
    pub window: WindowGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub n_classes: usize,
}

/// Top-level JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default = "none_frontend")]
    pub frontend: FrontendSpec,
    pub tdnn: TdnnSection,
    pub output: OutputSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub features: FbankConfig,
}

fn none_frontend() -> FrontendSpec {
    FrontendSpec::None
}

/// The architecture-only part of a config, used for checkpoint digests.
#[derive(Serialize)]
struct ArchitectureView<'a> {
    frontend: &'a FrontendSpec,
    tdnn: &'a TdnnSection,
    output: &'a OutputSection,
}

impl ArchitectureConfig {
    /// Strict parse; unknown keys and type errors name the location.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn tdnn_spec(&self) -> TdnnSpec {
        TdnnSpec {
            window: self.tdnn.window,
            tree_pairing: self.tdnn.tree_pairing.clone(),
            kernels: self.tdnn.kernels.clone(),
            width: self.tdnn.width,
            frontend: self.frontend.clone(),
            out_dim: self.output.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tdnn.window.feat_dim != 40 {
            return Err(Error::Config(format!(
                "tdnn.window.feat_dim must be 40, got {}",
                self.tdnn.window.feat_dim
            )));
        }
        self.tdnn_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.training.validate()?;
        self.features.resolve(16_000)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the frontend, tdnn and output sections.
    pub fn architecture_digest(&self) -> [u8; 32] {
        let view = ArchitectureView { frontend: &self.frontend, tdnn: &self.tdnn, output: &self.output };
        let json = serde_json::to_vec(&view).expect("architecture serializes");
        Sha256::digest(&json).into()
    }

    /// Applies a size override. The desk scale also switches to the desk
    /// minibatch and learning rate.
    pub fn scaled(&self, scale: Scale) -> Self {
        let mut c = self.clone();
        let (width, filters, sigma, linear, classes) = match scale {
            Scale::Paper => return c,
            Scale::Tiny => (3, 2, 3, 4, 3),
            Scale::Desk => (32, 8, 8, 16, 9),
        };
        c.tdnn.width = width;
        c.output.n_classes = classes;
        if scale == Scale::Desk {
            c.training.minibatch_frames = DESK_MINIBATCH_FRAMES;
            c.training.initial_lr = DESK_LR;
        }
        match &mut c.frontend {
            FrontendSpec::None => {}
            FrontendSpec::BandedCnn(b) => b.n_filters = filters,
            FrontendSpec::GridRnn(g) | FrontendSpec::TfRnn(g) | FrontendSpec::CoupledGrid(g) => {
                g.sigma_width = sigma;
                g.linear_width = linear;
            }
        }
        c
    }
}

/// Size override applied on top of a preset or config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// Widths of at most 4, for gradient checks.
    Tiny,
    /// Small widths that train in seconds per epoch.
    Desk,
    /// The published sizes.
    Paper,
}

/// Desk-scale minibatch: a 45k-frame epoch needs more than 56 updates.
pub const DESK_MINIBATCH_FRAMES: usize = 100;
pub const DESK_LR: f64 = 0.3;

/// Total-parameter budget the kernel-only presets are sized to.
pub const PARAM_BUDGET: usize = 6_600_000;
/// Published front-end size of the BD-FD-Grid-RNN.
pub const QUOTED_BD_FD_GRID_PARAMS: usize = 1_400_000;
/// Published convolution weight count.
pub const QUOTED_CONV_WEIGHTS: usize = 17_500;
/// Output classes used for count fidelity.
pub const FULL_OUT_DIM: usize = 6000;

/// What a preset's published figure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    TotalParams(usize),
    ConvWeights(usize),
    FrontendParams(usize),
}

impl Claim {
    pub fn describe(&self) -> String {
        match self {
            Claim::TotalParams(n) => format!("total parameters ~{}", fmt_count(*n)),
            Claim::ConvWeights(n) => format!("convolution weights {}", fmt_count(*n)),
            Claim::FrontendParams(n) => format!("front-end parameters ~{}", fmt_count(*n)),
        }
    }
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: ArchitectureConfig,
    pub claim: Option<Claim>,
    /// Width found by [`solve_width`] rather than quoted.
    pub solved_width: bool,
}

const NAMES: [&str; 11] = [
    "tdnn-baseline",
    "double-tdnn",
    "resnet-tdnn",
    "tdnn-deep",
    "resnet-tdnn-deep",
    "cnn-tdnn",
    "grid-rnn-tdnn",
    "fd-grid-rnn-resnet-tdnn",
    "bd-fd-grid-rnn-resnet-tdnn",
    "tf-rnn-tdnn",
    "coupled-grid-tdnn",
];

pub fn preset_names() -> &'static [&'static str] {
    &NAMES
}

fn arch(frontend: FrontendSpec, kernels: [KernelKind; 4], width: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        frontend,
        tdnn: TdnnSection {
            kernels: kernels.to_vec(),
            width,
            tree_pairing: default_tree_pairing(),
            window: WindowGeometry::default(),
        },
        output: OutputSection { n_classes: FULL_OUT_DIM },
        training: TrainConfig::default(),
        features: FbankConfig::default(),
    }
}

/// Width whose total parameter count is closest to `budget` (ties go to the
/// smaller width).
pub fn solve_width(frontend: &FrontendSpec, kernels: [KernelKind; 4], budget: usize) -> usize {
    let count = |w: usize| arch(frontend.clone(), kernels, w).tdnn_spec().param_count();
    let (mut lo, mut hi) = (1usize, 1usize);
    while count(hi) < budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if budget.abs_diff(count(lo)) <= count(hi).abs_diff(budget) {
        lo
    } else {
        hi
    }
}

/// Looks up a preset; `cnn-frontend` is accepted for `cnn-tdnn`.
pub fn preset(name: &str) -> Option<Preset> {
    use KernelKind::*;
    let name = if name == "cnn-frontend" { "cnn-tdnn" } else { name };
    let grid = |fd: bool, bd: bool| {
        FrontendSpec::GridRnn(GridRnnConfig { frequency_dependent: fd, bidirectional: bd, ..Default::default() })
    };
    let solved = |kernels: [KernelKind; 4]| arch(FrontendSpec::None, kernels, solve_width(&FrontendSpec::None, kernels, PARAM_BUDGET));
    let total = Some(Claim::TotalParams(PARAM_BUDGET));
    let (description, config, claim, solved_width) = match name {
        "tdnn-baseline" => ("standard kernels, width 653", arch(FrontendSpec::None, [Standard; 4], 653), total, false),
        "double-tdnn" => ("double kernels, width sized to the budget", solved([Double; 4]), total, true),
        "resnet-tdnn" => ("ResNet kernels, width 500", arch(FrontendSpec::None, [Resnet; 4], 500), total, false),
        "tdnn-deep" => (
            "standard kernels, kernel 4 four layers deep",
            solved([Standard, Standard, Standard, DeepStack(4)]),
            total,
            true,
        ),
        "resnet-tdnn-deep" => (
            "ResNet kernels 1-3, kernel 4 three plain layers",
            solved([Resnet, Resnet, Resnet, DeepStack(3)]),
            total,
            true,
        ),
        "cnn-tdnn" => (
            "banded frequency convolution, standard kernels, width 653",
            arch(FrontendSpec::BandedCnn(BandedConvConfig::default()), [Standard; 4], 653),
            Some(Claim::ConvWeights(QUOTED_CONV_WEIGHTS)),
            false,
        ),
        "grid-rnn-tdnn" => ("Grid-RNN, standard kernels, width 653", arch(grid(false, false), [Standard; 4], 653), None, false),
        "fd-grid-rnn-resnet-tdnn" => (
            "frequency-dependent Grid-RNN, ResNet kernels, width 500",
            arch(grid(true, false), [Resnet; 4], 500),
            None,
            false,
        ),
        "bd-fd-grid-rnn-resnet-tdnn" => (
            "bidirectional frequency-dependent Grid-RNN, ResNet kernels, width 500",
            arch(grid(true, true), [Resnet; 4], 500),
            Some(Claim::FrontendParams(QUOTED_BD_FD_GRID_PARAMS)),
            false,
        ),
        "tf-rnn-tdnn" => (
            "TF-RNN front-end, standard kernels, width 653",
            arch(FrontendSpec::TfRnn(GridRnnConfig::default()), [Standard; 4], 653),
            None,
            false,
        ),
        "coupled-grid-tdnn" => (
            "coupled grid cell front-end, standard kernels, width 653",
            arch(FrontendSpec::CoupledGrid(GridRnnConfig::default()), [Standard; 4], 653),
            None,
            false,
        ),
        _ => return None,
    };
    let name = NAMES.iter().find(|n| **n == name).expect("listed");
    Some(Preset { name, description, config, claim, solved_width })
}

pub fn presets() -> Vec<Preset> {
    NAMES.iter().map(|n| preset(n).expect("listed")).collect()
}

/// `6615666` → `6,615,666`.
pub fn fmt_count(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in presets() {
            p.config.validate().unwrap();
            let back = ArchitectureConfig::from_json(&p.config.to_json()).unwrap();
            assert_eq!(back, p.config, "{}", p.name);
            for s in [Scale::Tiny, Scale::Desk] {
                p.config.scaled(s).validate().unwrap();
            }
        }
    }

    #[test]
    fn quoted_totals() {
        assert_eq!(preset("tdnn-baseline").unwrap().config.tdnn_spec().param_count(), 6_615_666);
        assert_eq!(preset("resnet-tdnn").unwrap().config.tdnn_spec().param_count(), 6_612_000);
    }

    #[test]
    fn solved_widths_are_closest() {
        for name in ["double-tdnn", "tdnn-deep", "resnet-tdnn-deep"] {
            let p = preset(name).unwrap();
            let w = p.config.tdnn.width;
            let k: [KernelKind; 4] = p.config.tdnn.kernels.clone().try_into().unwrap();
            let d = |w| arch(FrontendSpec::None, k, w).tdnn_spec().param_count().abs_diff(PARAM_BUDGET);
            assert!(d(w) <= d(w - 1) && d(w) <= d(w + 1), "{name}");
            assert!(d(w) * 50 <= PARAM_BUDGET);
        }
        // the quoted widths sit within one step of the solver's choice
        assert_eq!(solve_width(&FrontendSpec::None, [KernelKind::Resnet; 4], PARAM_BUDGET), 499);
        assert_eq!(solve_width(&FrontendSpec::None, [KernelKind::Standard; 4], PARAM_BUDGET), 652);
    }

    #[test]
    fn tiny_scale_is_small() {
        for p in presets() {
            let t = p.config.scaled(Scale::Tiny);
            assert!(t.tdnn.width <= 4);
            match &t.frontend {
                FrontendSpec::GridRnn(g) | FrontendSpec::TfRnn(g) | FrontendSpec::CoupledGrid(g) => {
                    assert!(g.sigma_width <= 4 && g.linear_width <= 4)
                }
                FrontendSpec::BandedCnn(b) => assert!(b.n_filters <= 4),
                FrontendSpec::None => {}
            }
        }
    }

    #[test]
    fn strict_schema() {
        let good = r#"{"tdnn":{"kernels":["standard","standard","standard",{"deep_stack":4}],"width":8},"output":{"n_classes":3}}"#;
        let c = ArchitectureConfig::from_json(good).unwrap();
        assert_eq!(c.tdnn_spec().layer_depth(), 8);
        let bad = r#"{"tdnn":{"kernels":["standard","standard","standard","standard"],"width":8,"depth":3},"output":{"n_classes":3}}"#;
        let e = ArchitectureConfig::from_json(bad).unwrap_err().to_string();
        assert!(e.contains("depth"), "{e}");
        let bad = r#"{"tdnn":{"kernels":["standard"],"width":8},"output":{"n_classes":3}}"#;
        assert!(matches!(ArchitectureConfig::from_json(bad), Err(Error::Config(_))));
        assert!(ArchitectureConfig::from_json("{").is_err());
    }

    #[test]
    fn digest_ignores_training_section() {
        let a = preset("resnet-tdnn").unwrap().config;
        let mut b = a.clone();
        b.training.initial_lr = 0.5;
        assert_eq!(a.architecture_digest(), b.architecture_digest());
        b.tdnn.width += 1;
        assert_ne!(a.architecture_digest(), b.architecture_digest());
    }

    #[test]
    fn count_formatting() {
        assert_eq!(fmt_count(6_615_666), "6,615,666");
        assert_eq!(fmt_count(700), "700");
        assert_eq!(fmt_count(1000), "1,000");
    }
}
