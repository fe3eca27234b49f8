use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConvGeom, ParamGroup, ParamId, PoolGeom, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Dense ReLU layers; the last hidden layer is the feature layer.
    Mlp,
    /// Two 3×3 same-padded convolutions, a 2×2 average pool, then a dense
    /// ReLU feature layer. Expects `[channels, height, width]` inputs.
    TinyConv,
    /// No feature extractor: `h = x` and the head is a linear softmax classifier.
    Linear,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp => "mlp",
            Architecture::TinyConv => "tiny-conv",
            Architecture::Linear => "linear",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "tiny-conv" => Ok(Architecture::TinyConv),
            "linear" => Ok(Architecture::Linear),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Architecture settings independent of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Dense widths before the feature layer (mlp) or the two conv channel
    /// counts (tiny-conv). Ignored by `linear`.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Mlp,
            hidden: vec![32],
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(config: &ModelConfig, input_shape: &[usize], classes: usize, init_seed: u64) -> Result<Self> {
        let input_dim: usize = input_shape.iter().product();
        let feature_dim = match config.arch {
            Architecture::Linear => input_dim,
            _ => config.feature_dim,
        };
        let spec = Self {
            arch: config.arch,
            input_shape: input_shape.to_vec(),
            hidden: config.hidden.clone(),
            feature_dim,
            classes,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.feature_dim == 0 || self.input_dim() == 0 {
            return Err(Error::Config("feature and input dimensions must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.arch == Architecture::TinyConv {
            if self.input_shape.len() != 3 || self.input_shape[1] < 2 || self.input_shape[2] < 2 {
                return Err(Error::Config(format!(
                    "tiny-conv needs [channels, height, width] input, got {:?}",
                    self.input_shape
                )));
            }
            if self.hidden.len() != 2 {
                return Err(Error::Config("tiny-conv takes exactly two conv widths".into()));
            }
        }
        if self.arch == Architecture::Linear && self.feature_dim != self.input_dim() {
            return Err(Error::Config("linear model features are the inputs".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Dense { w: usize, b: usize },
    Conv { k: usize, b: usize, geom: ConvGeom },
    Pool(PoolGeom),
}

/// Parameter metadata; values live in [`Model::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
}

/// Feature extractor `f` and classifier head `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    extractor: Vec<Layer>,
    head: (usize, usize),
    params: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
}

/// Nodes of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("sized")
}

impl<T: Scalar> Model<T> {
    /// He-uniform extractor weights, Glorot-uniform head, zero biases.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = Vec::new();
        let mut info = Vec::new();
        let mut push = |name: String, group, value| {
            params.push(value);
            info.push(ParamInfo { name, group });
            params.len() - 1
        };
        let fe = ParamGroup::FeatureExtractor;
        let mut extractor = Vec::new();
        let mut width = spec.input_dim();
        match spec.arch {
            Architecture::Linear => {}
            Architecture::Mlp => {
                let widths = spec.hidden.iter().chain(std::iter::once(&spec.feature_dim));
                for (i, &out) in widths.enumerate() {
                    let bound = (6.0 / width as f64).sqrt();
                    let w = push(format!("fe.dense{i}.weight"), fe, uniform(&mut rng, vec![width, out], bound));
                    let b = push(format!("fe.dense{i}.bias"), fe, Tensor::zeros(vec![1, out]));
                    extractor.push(Layer::Dense { w, b });
                    width = out;
                }
            }
            Architecture::TinyConv => {
                let (mut ch, h, wd) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
                for (i, &out) in spec.hidden.iter().enumerate() {
                    let geom = ConvGeom {
                        in_channels: ch,
                        out_channels: out,
                        height: h,
                        width: wd,
                        kernel: 3,
                    };
                    let bound = (6.0 / (ch * 9) as f64).sqrt();
                    let k = push(format!("fe.conv{i}.kernel"), fe, uniform(&mut rng, vec![out, ch * 9], bound));
                    let b = push(format!("fe.conv{i}.bias"), fe, Tensor::zeros(vec![1, out]));
                    extractor.push(Layer::Conv { k, b, geom });
                    ch = out;
                }
                let pool = PoolGeom {
                    channels: ch,
                    height: h,
                    width: wd,
                };
                extractor.push(Layer::Pool(pool));
                width = ch * pool.out_height() * pool.out_width();
                let bound = (6.0 / width as f64).sqrt();
                let w = push("fe.dense.weight".into(), fe, uniform(&mut rng, vec![width, spec.feature_dim], bound));
                let b = push("fe.dense.bias".into(), fe, Tensor::zeros(vec![1, spec.feature_dim]));
                extractor.push(Layer::Dense { w, b });
                width = spec.feature_dim;
            }
        }
        let bound = (6.0 / (width + spec.classes) as f64).sqrt();
        let hw = push("head.weight".into(), ParamGroup::Head, uniform(&mut rng, vec![width, spec.classes], bound));
        let hb = push("head.bias".into(), ParamGroup::Head, Tensor::zeros(vec![1, spec.classes]));
        Ok(Self {
            spec,
            extractor,
            head: (hw, hb),
            params,
            info,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn head_param_ids(&self) -> [ParamId; 2] {
        [ParamId(self.head.0), ParamId(self.head.1)]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input {:?} vs model input {:?}", x.shape(), self.spec.input_shape),
            ));
        }
        Ok(())
    }

    fn record_param(&self, tape: &mut Tape<T>, i: usize) -> Var {
        tape.param(ParamId(i), self.info[i].group, self.params[i].clone())
    }

    /// Records `h = f(x)`, logits and `ŷ = softmax(g(h))` for the rows of `x`.
    pub fn record_forward(&self, tape: &mut Tape<T>, x: Tensor<T>) -> Result<ForwardVars> {
        self.check_input(&x)?;
        let mut act = tape.constant(x);
        for layer in &self.extractor {
            act = match *layer {
                Layer::Dense { w, b } => {
                    let (w, b) = (self.record_param(tape, w), self.record_param(tape, b));
                    let z = tape.matmul(act, w)?;
                    let z = tape.add_row(z, b)?;
                    tape.relu(z)
                }
                Layer::Conv { k, b, geom } => {
                    let (k, b) = (self.record_param(tape, k), self.record_param(tape, b));
                    let z = tape.conv2d(act, k, b, geom)?;
                    tape.relu(z)
                }
                Layer::Pool(geom) => tape.avg_pool2(act, geom)?,
            };
        }
        let features = act;
        let (w, b) = (self.record_param(tape, self.head.0), self.record_param(tape, self.head.1));
        let z = tape.matmul(features, w)?;
        let logits = tape.add_row(z, b)?;
        let probs = tape.softmax_rows(logits);
        let log_probs = tape.log_softmax_rows(logits);
        Ok(ForwardVars {
            features,
            logits,
            probs,
            log_probs,
        })
    }

    /// Inference pass: `(h, ŷ)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.record_forward(&mut tape, x.clone())?;
        Ok((tape.value(vars.features).clone(), tape.value(vars.probs).clone()))
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x).map(|(h, _)| h)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    fn mlp(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            arch: Architecture::Mlp,
            hidden: vec![6],
            feature_dim: 4,
        };
        Model::new(ModelSpec::new(&cfg, &[3], 3, seed).unwrap()).unwrap()
    }

    fn input() -> Tensor<f64> {
        Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut m = mlp(1);
        for id in m.head_param_ids() {
            m.params_mut()[id.0] = Tensor::zeros(m.params()[id.0].shape().to_vec());
        }
        let (_, p) = m.forward(&input()).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let m = mlp(2);
        let x = Tensor::from_rows(&[vec![0.3, 0.1, -0.7], vec![0.3, 0.1, -0.7]]).unwrap();
        let (h, p) = m.forward(&x).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn init_and_forward_are_deterministic() {
        assert_eq!(mlp(3).forward(&input()).unwrap(), mlp(3).forward(&input()).unwrap());
        assert_ne!(mlp(3).params(), mlp(4).params());
    }

    #[test]
    fn rows_are_distributions() {
        let (h, p) = mlp(5).forward(&input()).unwrap();
        assert_eq!(h.shape(), &[2, 4]);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let x = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(matches!(mlp(1).forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn parameter_groups() {
        let m = mlp(1);
        let heads = m.param_info().iter().filter(|p| p.group == ParamGroup::Head).count();
        assert_eq!((m.params().len(), heads), (6, 2));
        let lin = Model::<f64>::new(
            ModelSpec::new(
                &ModelConfig {
                    arch: Architecture::Linear,
                    hidden: vec![],
                    feature_dim: 0,
                },
                &[3],
                2,
                0,
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(lin.params().len(), 2);
        assert_eq!(lin.features(&input()).unwrap(), input());
    }

    fn ce_loss(m: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, crate::diffcore::GradientMap<f64>) {
        let mut tape = Tape::new();
        let fw = m.record_forward(&mut tape, x.clone()).unwrap();
        let lp = tape.pick(fw.log_probs, labels).unwrap();
        let loss = tape.mean(lp).unwrap();
        (tape.value(loss).item(), tape.backward(loss).unwrap())
    }

    fn check_all_params(m: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) {
        let (_, grads) = ce_loss(m, x, labels);
        for i in 0..m.params().len() {
            let analytic = grads.get(ParamId(i)).unwrap().clone();
            let report = finite_difference_check(
                |p| {
                    let mut probe = m.clone();
                    probe.params_mut()[i] = p.clone();
                    Ok(ce_loss(&probe, x, labels).0)
                },
                &m.params()[i],
                &analytic,
                1e-6,
                |_| false,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{}: {report:?}", m.param_info()[i].name);
        }
    }

    #[test]
    fn tiny_conv_shapes_and_gradients() {
        let cfg = ModelConfig {
            arch: Architecture::TinyConv,
            hidden: vec![2, 2],
            feature_dim: 3,
        };
        let m: Model<f64> = Model::new(ModelSpec::new(&cfg, &[1, 4, 4], 2, 9).unwrap()).unwrap();
        let x = Tensor::new(vec![2, 16], (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let (h, p) = m.forward(&x).unwrap();
        assert_eq!((h.shape(), p.shape()), (&[2, 3][..], &[2, 2][..]));
        check_all_params(&m, &x, &[0, 1]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        check_all_params(&mlp(7), &input(), &[2, 0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.1; 10]), 0);
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in [Architecture::Mlp, Architecture::TinyConv, Architecture::Linear] {
            assert_eq!(a.to_string().parse::<Architecture>().unwrap(), a);
        }
    }
}
