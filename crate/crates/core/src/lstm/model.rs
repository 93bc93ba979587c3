use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::{GeoMode, LstmGeoConfig, GEO_FEATURES};
use crate::error::{Error, Result};
use crate::race::NUM_CLASSES;

/// Gate blocks inside each `4H` row, in storage order.
pub(crate) const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

/// Offsets of one LSTM direction inside the flat parameter vector.
///
/// `w_ih` is `input × 4H`, `w_hh` is `H × 4H`, `bias` is `4H`; gate blocks
/// within a row are input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Geo features fed to the head (0 unless geo fusion is at the head).
    pub head_geo: usize,
    pub embedding: usize,
    /// `cells[layer][0]` runs forward in time, `cells[layer][1]` backward.
    pub cells: Vec<[CellLayout; 2]>,
    /// `features × 5`
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &LstmGeoConfig) -> Self {
        let vocab = Vocabulary::for_mode(config.geo_mode).len();
        let (e, h) = (config.embed_dim, config.hidden_units);
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let embedding = take(vocab * e);
        let mut cells = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let input = if layer == 0 { e } else { 2 * h };
            let mut cell = || CellLayout {
                input,
                hidden: h,
                w_ih: take(input * 4 * h),
                w_hh: take(h * 4 * h),
                bias: take(4 * h),
            };
            let fwd = cell();
            let bwd = cell();
            cells.push([fwd, bwd]);
        }
        let head_geo = if config.geo_mode == GeoMode::Head { GEO_FEATURES } else { 0 };
        let head_w = take((2 * h + head_geo) * NUM_CLASSES);
        let head_b = take(NUM_CLASSES);
        ParamLayout {
            vocab,
            embed: e,
            hidden: h,
            head_geo,
            embedding,
            cells,
            head_w,
            head_b,
            total: at,
        }
    }

    pub fn head_features(&self) -> usize {
        2 * self.hidden + self.head_geo
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        let mut out = vec![TensorSpec {
            name: "embedding".into(),
            shape: vec![self.vocab, self.embed],
            offset: self.embedding,
        }];
        for (layer, dirs) in self.cells.iter().enumerate() {
            for (dir, cell) in ["forward", "backward"].iter().zip(dirs) {
                let g = 4 * cell.hidden;
                out.push(TensorSpec {
                    name: format!("layer{layer}.{dir}.w_ih"),
                    shape: vec![cell.input, g],
                    offset: cell.w_ih,
                });
                out.push(TensorSpec {
                    name: format!("layer{layer}.{dir}.w_hh"),
                    shape: vec![cell.hidden, g],
                    offset: cell.w_hh,
                });
                out.push(TensorSpec {
                    name: format!("layer{layer}.{dir}.bias"),
                    shape: vec![g],
                    offset: cell.bias,
                });
            }
        }
        out.push(TensorSpec {
            name: "head.w".into(),
            shape: vec![self.head_features(), NUM_CLASSES],
            offset: self.head_w,
        });
        out.push(TensorSpec {
            name: "head.b".into(),
            shape: vec![NUM_CLASSES],
            offset: self.head_b,
        });
        out
    }

    /// Human-readable location of one scalar parameter, e.g.
    /// `layer1.backward.w_hh[2, forget 0]`.
    pub fn path_of(&self, index: usize) -> String {
        for t in self.tensors() {
            if index < t.offset || index >= t.offset + t.len() {
                continue;
            }
            let local = index - t.offset;
            let is_cell = t.name.starts_with("layer");
            return match t.shape.as_slice() {
                [_, cols] => {
                    let (row, col) = (local / cols, local % cols);
                    if is_cell {
                        let h = cols / 4;
                        format!("{}[{row}, {} {}]", t.name, GATE_NAMES[col / h], col % h)
                    } else {
                        format!("{}[{row}, {col}]", t.name)
                    }
                }
                [len] if is_cell => {
                    let h = len / 4;
                    format!("{}[{} {}]", t.name, GATE_NAMES[local / h], local % h)
                }
                _ => format!("{}[{local}]", t.name),
            };
        }
        format!("<out of range {index}>")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub final_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGeoModel {
    pub config: LstmGeoConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

impl LstmGeoModel {
    /// Uniform(-k, k) with `k = 1/sqrt(fan_in)` per matrix; embeddings use
    /// k = 1 (a lookup has fan-in one). Biases start at zero except the
    /// forget gate, which starts at one.
    pub fn init(config: &LstmGeoConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |range: core::ops::Range<usize>, k: f64, params: &mut [f64]| {
            for p in &mut params[range] {
                *p = rng.gen_range(-k..k);
            }
        };

        let emb_len = layout.vocab * layout.embed;
        fill(layout.embedding..layout.embedding + emb_len, 1.0, &mut params);
        for dirs in &layout.cells {
            for cell in dirs {
                let g = 4 * cell.hidden;
                fill(cell.w_ih..cell.w_ih + cell.input * g, 1.0 / libm::sqrt(cell.input as f64), &mut params);
                fill(cell.w_hh..cell.w_hh + cell.hidden * g, 1.0 / libm::sqrt(cell.hidden as f64), &mut params);
                for b in &mut params[cell.bias + cell.hidden..cell.bias + 2 * cell.hidden] {
                    *b = 1.0;
                }
            }
        }
        let f = layout.head_features();
        fill(layout.head_w..layout.head_w + f * NUM_CLASSES, 1.0 / libm::sqrt(f as f64), &mut params);

        Ok(LstmGeoModel {
            config: config.clone(),
            layout,
            params,
            meta: TrainingMeta::default(),
        })
    }

    /// Rebuilds a model from a config and a flat parameter vector.
    pub fn from_params(config: LstmGeoConfig, params: Vec<f64>, meta: TrainingMeta) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                found: params.len(),
                what: "parameter vector",
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invariant("model parameters must be finite".into()));
        }
        Ok(LstmGeoModel {
            config,
            layout,
            params,
            meta,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::for_mode(self.config.geo_mode)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensors().into_iter().find(|t| t.name == name)?;
        Some(&mut self.params[t.offset..t.offset + t.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_every_parameter_once() {
        for mode in [GeoMode::Disabled, GeoMode::Head, GeoMode::PrefixTokens] {
            let config = LstmGeoConfig {
                geo_mode: mode,
                ..LstmGeoConfig::micro()
            };
            let layout = ParamLayout::new(&config);
            let mut covered = vec![0u8; layout.total];
            for t in layout.tensors() {
                for c in &mut covered[t.offset..t.offset + t.len()] {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn paths_name_gates() {
        let config = LstmGeoConfig::micro();
        let layout = ParamLayout::new(&config);
        let cell = layout.cells[1][1];
        // row 2, column H + 0 is the forget gate of unit 0
        let idx = cell.w_hh + 2 * 4 * cell.hidden + cell.hidden;
        assert_eq!(layout.path_of(idx), "layer1.backward.w_hh[2, forget 0]");
        assert_eq!(layout.path_of(layout.head_b + 4), "head.b[4]");
    }

    #[test]
    fn init_is_seeded_and_sets_forget_bias() {
        let config = LstmGeoConfig::micro();
        let a = LstmGeoModel::init(&config).unwrap();
        let b = LstmGeoModel::init(&config).unwrap();
        assert_eq!(a.params, b.params);
        let bias = a.tensor("layer0.forward.bias").unwrap();
        let h = config.hidden_units;
        assert!(bias[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(bias[..h].iter().all(|&v| v == 0.0));
        let k = 1.0 / libm::sqrt(config.embed_dim as f64);
        assert!(a.tensor("layer0.forward.w_ih").unwrap().iter().all(|v| v.abs() <= k));
    }
}
