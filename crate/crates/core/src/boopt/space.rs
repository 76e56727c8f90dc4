use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{Cell, MergeConfig, MergeMode};

/// How a unit-interval coordinate maps to a hyperparameter value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DimKind {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DimKind {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            DimKind::LogUniform { lo, hi } | DimKind::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn decode(&self, u: f64) -> f64 {
        let (lo, hi) = self.bounds();
        if u <= 0.0 {
            return lo;
        }
        if u >= 1.0 {
            return hi;
        }
        match *self {
            DimKind::LogUniform { .. } => (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi),
            DimKind::Uniform { .. } => lo + u * (hi - lo),
        }
    }

    pub fn encode(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds();
        if hi == lo {
            return 0.0;
        }
        let u = match *self {
            DimKind::LogUniform { .. } => (v.ln() - lo.ln()) / (hi.ln() - lo.ln()),
            DimKind::Uniform { .. } => (v - lo) / (hi - lo),
        };
        u.clamp(0.0, 1.0)
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.bounds();
        let slack = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
        v.is_finite() && v >= lo - slack && v <= hi + slack
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
}

/// Something the optimizer can search: a box `[0,1]^D` plus a decoder.
pub trait SearchDomain {
    type Config: Clone + Serialize + DeserializeOwned;

    fn dim(&self) -> usize;

    fn decode(&self, point: &[f64]) -> Result<Self::Config>;
}

fn check_unit(point: &[f64], dim: usize) -> Result<()> {
    if point.len() != dim {
        return Err(Error::dims("decode", dim, point.len()));
    }
    if let Some(u) = point.iter().find(|u| !(0.0..=1.0).contains(*u)) {
        return Err(Error::OutOfRange(format!("coordinate {u} outside [0, 1]")));
    }
    Ok(())
}

/// Plain box of named dimensions; configs are the decoded value vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        for d in &dims {
            let (lo, hi) = d.kind.bounds();
            let ok = match d.kind {
                DimKind::LogUniform { .. } => lo > 0.0 && hi >= lo,
                DimKind::Uniform { .. } => hi >= lo,
            };
            if !ok || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("bad bounds [{lo}, {hi}] for `{}`", d.name)));
            }
        }
        Ok(Self { dims })
    }

    /// `dim` copies of `Uniform(0, 1)`.
    pub fn unit_cube(dim: usize) -> Self {
        Self {
            dims: (0..dim)
                .map(|i| Dimension {
                    name: format!("x{i}"),
                    kind: DimKind::Uniform { lo: 0.0, hi: 1.0 },
                })
                .collect(),
        }
    }

    pub fn encode(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dims.len() {
            return Err(Error::dims("encode", self.dims.len(), values.len()));
        }
        self.dims
            .iter()
            .zip(values)
            .map(|(d, &v)| {
                if d.kind.contains(v) {
                    Ok(d.kind.encode(v))
                } else {
                    Err(Error::OutOfRange(format!("{} = {v} outside its bounds", d.name)))
                }
            })
            .collect()
    }
}

impl SearchDomain for SearchSpace {
    type Config = Vec<f64>;

    fn dim(&self) -> usize {
        self.dims.len()
    }

    fn decode(&self, point: &[f64]) -> Result<Vec<f64>> {
        check_unit(point, self.dims.len())?;
        Ok(self.dims.iter().zip(point).map(|(d, &u)| d.kind.decode(u)).collect())
    }
}

/// Search ranges for λ and the block scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Preset {
    /// λ ∈ [1e-4, 1] (log), s ∈ [1.0, 1.3].
    pub fn vit_like() -> Self {
        Self {
            lambda_lo: 1e-4,
            lambda_hi: 1.0,
            scale_lo: 1.0,
            scale_hi: 1.3,
        }
    }

    /// λ ∈ [1e-3, 100] (log), s ∈ [1.0, 1.3].
    pub fn llama_like() -> Self {
        Self {
            lambda_lo: 1e-3,
            lambda_hi: 100.0,
            ..Self::vit_like()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vit-like" => Ok(Self::vit_like()),
            "llama-like" => Ok(Self::llama_like()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl Default for Preset {
    fn default() -> Self {
        Self::vit_like()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Scale(usize),
    Lambda(Cell),
    Eps,
}

/// Block-tied merge hyperparameters: per block one scale followed by one λ
/// per group, plus a trailing ε in mixed mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpace {
    pub space: SearchSpace,
    pub slots: Vec<Slot>,
    pub mode: MergeMode,
}

impl MergeSpace {
    pub fn new(cells: &BTreeSet<Cell>, mode: MergeMode, preset: &Preset) -> Result<Self> {
        let mut dims = Vec::new();
        let mut slots = Vec::new();
        let blocks: BTreeSet<usize> = cells.iter().map(|c| c.block).collect();
        for block in blocks {
            dims.push(Dimension {
                name: format!("s/b{block}"),
                kind: DimKind::Uniform {
                    lo: preset.scale_lo,
                    hi: preset.scale_hi,
                },
            });
            slots.push(Slot::Scale(block));
            for cell in cells.iter().filter(|c| c.block == block) {
                dims.push(Dimension {
                    name: format!("lambda/{cell}"),
                    kind: DimKind::LogUniform {
                        lo: preset.lambda_lo,
                        hi: preset.lambda_hi,
                    },
                });
                slots.push(Slot::Lambda(cell.clone()));
            }
        }
        if mode == MergeMode::Mixed {
            dims.push(Dimension {
                name: "eps".into(),
                kind: DimKind::Uniform { lo: 0.0, hi: 1.0 },
            });
            slots.push(Slot::Eps);
        }
        Ok(Self {
            space: SearchSpace::new(dims)?,
            slots,
            mode,
        })
    }

    pub fn encode(&self, config: &MergeConfig) -> Result<Vec<f64>> {
        if config.mode != self.mode {
            return Err(Error::Config(format!(
                "config mode {} does not match search mode {}",
                config.mode, self.mode
            )));
        }
        let values = self
            .slots
            .iter()
            .map(|slot| match slot {
                Slot::Scale(b) => config.scale(*b),
                Slot::Lambda(c) => config.lambda(c),
                Slot::Eps => config
                    .eps
                    .ok_or_else(|| Error::Config("mixed mode needs eps".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        self.space.encode(&values)
    }
}

impl SearchDomain for MergeSpace {
    type Config = MergeConfig;

    fn dim(&self) -> usize {
        self.slots.len()
    }

    fn decode(&self, point: &[f64]) -> Result<MergeConfig> {
        let values = self.space.decode(point)?;
        let mut cfg = MergeConfig::new(self.mode);
        for (slot, v) in self.slots.iter().zip(values) {
            match slot {
                Slot::Scale(b) => cfg.set_scale(*b, v),
                Slot::Lambda(c) => {
                    cfg.lambdas.insert(c.clone(), v);
                }
                Slot::Eps => cfg.eps = Some(v),
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells() -> BTreeSet<Cell> {
        ["mlp-in", "mlp-out"]
            .iter()
            .flat_map(|g| (0..2).map(move |b| Cell::new(b, g)))
            .collect()
    }

    #[test]
    fn log_uniform_endpoints_and_midpoint() {
        let k = DimKind::LogUniform { lo: 1e-4, hi: 1.0 };
        assert_eq!(k.decode(0.0), 1e-4);
        assert_eq!(k.decode(1.0), 1.0);
        assert!((k.decode(0.5) - 1e-2).abs() < 1e-15);
        let s = DimKind::Uniform { lo: 1.0, hi: 1.3 };
        assert!((s.decode(0.5) - 1.15).abs() < 1e-15);
    }

    #[test]
    fn dimension_count() {
        let p = Preset::vit_like();
        assert_eq!(MergeSpace::new(&cells(), MergeMode::Assisted, &p).unwrap().dim(), 6);
        assert_eq!(MergeSpace::new(&cells(), MergeMode::Mixed, &p).unwrap().dim(), 7);
        let four: BTreeSet<Cell> = ["attn-in", "attn-out", "mlp-in", "mlp-out"]
            .iter()
            .flat_map(|g| (0..3).map(move |b| Cell::new(b, g)))
            .collect();
        assert_eq!(MergeSpace::new(&four, MergeMode::DataFree, &p).unwrap().dim(), 15);
    }

    #[test]
    fn decode_rejects_points_outside_cube() {
        let space = MergeSpace::new(&cells(), MergeMode::Assisted, &Preset::vit_like()).unwrap();
        assert!(matches!(space.decode(&[0.5, 0.5, 0.5, 0.5, 0.5, 1.5]), Err(Error::OutOfRange(_))));
        assert!(space.decode(&[0.5; 5]).is_err());
    }

    #[test]
    fn encode_rejects_out_of_bounds_config() {
        let space = MergeSpace::new(&cells(), MergeMode::Assisted, &Preset::vit_like()).unwrap();
        let cfg = MergeConfig::shared(MergeMode::Assisted, &cells(), 10.0, 1.0);
        assert!(matches!(space.encode(&cfg), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn unknown_preset() {
        assert!(Preset::by_name("llama-like").is_ok());
        assert!(Preset::by_name("bert").is_err());
    }
}
