//! Named parameter layout of the full network, seeded initialization and
//! weight-file round trips.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dceb::ExchangeWeights;
use crate::decoder::{AttentionWeights, DecoderConfig, DecoderWeights};
use crate::error::{invalid, Error, Result};
use crate::layers::{LayerNorm, Linear, Matrix};
use crate::media_io::{read_tensor, write_tensor, NamedTensorFile, TensorEntry};
use crate::sdmu::PdcWeights;
use crate::stmap::DEFAULT_GRID;

/// Network hyper-parameters that fix the tensor shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Channels after the stem, stage 1 and stage 2 of both encoders.
    pub channels: [usize; 3],
    pub decoder: DecoderConfig,
    pub grid: (usize, usize),
    /// Side length frames are resized to before the video encoder.
    pub frame_size: usize,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            decoder: DecoderConfig::default(),
            grid: DEFAULT_GRID,
            frame_size: 64,
            tau: 0.5,
            lambda: 1.0,
        }
    }
}

pub const STAGES: [&str; 3] = ["stem", "stage1", "stage2"];
pub const SCALES: [&str; 3] = ["t1", "t2", "t4"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    Uniform { fan_in: usize },
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest magnitude the initializer may produce.
    pub fn bound(&self) -> f64 {
        match self.init {
            Init::Uniform { fan_in } => 1.0 / (fan_in as f64).sqrt(),
            Init::Constant(v) => v.abs() as f64,
        }
    }
}

fn uniform(name: String, dims: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name,
        dims,
        init: Init::Uniform { fan_in },
    }
}

fn constant(name: String, dims: Vec<usize>, value: f32) -> ParamSpec {
    ParamSpec {
        name,
        dims,
        init: Init::Constant(value),
    }
}

/// Every parameter in file order. Initialization draws in this order too.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (stage, &cout) in STAGES.iter().zip(&cfg.channels) {
        out.push(uniform(format!("video.{stage}.w"), vec![cout, cin, 3, 3, 3], cin * 27));
        out.push(uniform(format!("video.{stage}.b"), vec![cout], cin * 27));
        cin = cout;
    }
    let mut cin = 3;
    for (stage, &cout) in STAGES.iter().zip(&cfg.channels) {
        out.push(uniform(format!("stmap.{stage}.w"), vec![cout, cin, 3, 3], cin * 9));
        out.push(uniform(format!("stmap.{stage}.b"), vec![cout], cin * 9));
        cin = cout;
    }
    for (k, &c) in cfg.channels.iter().enumerate() {
        out.push(uniform(format!("sdmu.{k}.Wc"), vec![c, c, 8], c * 8));
        out.push(uniform(format!("sdmu.{k}.Wr"), vec![c, c, 8], c * 8));
        out.push(uniform(format!("sdmu.{k}.Wf"), vec![c, 2 * c], 2 * c));
    }
    let (rows, cols) = cfg.grid;
    for (scale, &c) in SCALES.iter().zip(&cfg.channels) {
        let p = |s: &str| format!("dceb.{scale}.{s}");
        out.push(uniform(p("M0"), vec![rows, cols], 1));
        out.push(uniform(p("mlp_s2v.w1"), vec![c, c], c));
        out.push(uniform(p("mlp_s2v.b1"), vec![c], c));
        out.push(uniform(p("mlp_s2v.w2"), vec![1, c], c));
        out.push(uniform(p("mlp_s2v.b2"), vec![1], c));
        out.push(uniform(p("conv_v2s"), vec![c], c));
        out.push(uniform(p("proj_tilde_s"), vec![c, c], c));
        out.push(uniform(p("proj_tilde_v"), vec![c, c], c));
        out.push(uniform(p("alpha_s2v"), vec![c], 1));
        out.push(uniform(p("alpha_v2s"), vec![c], 1));
    }
    let c = cfg.channels[2];
    let d = cfg.decoder.d_model;
    let p = |s: &str| format!("decoder.{s}");
    let linear = |out: &mut Vec<ParamSpec>, name: &str, o: usize, i: usize| {
        out.push(uniform(p(&format!("{name}.w")), vec![o, i], i));
        out.push(uniform(p(&format!("{name}.b")), vec![o], i));
    };
    linear(&mut out, "proj_v", d, c);
    linear(&mut out, "proj_s", d, c);
    linear(&mut out, "state", d, 4);
    out.push(uniform(p("queries"), vec![cfg.decoder.queries, d], 1));
    for m in ["q", "k", "v", "o"] {
        out.push(uniform(p(&format!("attn.w{m}")), vec![d, d], d));
        out.push(uniform(p(&format!("attn.b{m}")), vec![d], d));
    }
    out.push(constant(p("ln1.gamma"), vec![d], 1.0));
    out.push(constant(p("ln1.beta"), vec![d], 0.0));
    out.push(uniform(p("ffn.w1"), vec![4 * d, d], d));
    out.push(uniform(p("ffn.b1"), vec![4 * d], d));
    out.push(uniform(p("ffn.w2"), vec![d, 4 * d], 4 * d));
    out.push(uniform(p("ffn.b2"), vec![d], 4 * d));
    out.push(constant(p("ln2.gamma"), vec![d], 1.0));
    out.push(constant(p("ln2.beta"), vec![d], 0.0));
    linear(&mut out, "gate", 2, d);
    linear(&mut out, "query_head", d, d);
    linear(&mut out, "out_head", 1, d);
    out.push(constant(p("lambda"), vec![1], cfg.lambda as f32));
    out.push(constant(p("tau"), vec![1], cfg.tau as f32));
    out
}

/// Largest `f32` not above `x`.
fn f32_floor(x: f64) -> f32 {
    let v = x as f32;
    if v as f64 > x {
        f32::from_bits(v.to_bits() - 1)
    } else {
        v
    }
}

/// Weights drawn from ChaCha8 seeded with `seed`, tensor by tensor in
/// [`param_layout`] order.
pub fn init_weight_file(seed: u64, cfg: &ModelConfig) -> NamedTensorFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = NamedTensorFile::new();
    for spec in param_layout(cfg) {
        let data = match spec.init {
            Init::Uniform { .. } => {
                let k = f32_floor(spec.bound());
                (0..spec.len()).map(|_| rng.random_range(-k..=k)).collect()
            }
            Init::Constant(v) => vec![v; spec.len()],
        };
        let entry = TensorEntry::new(spec.name, spec.dims, data).expect("layout dims match data");
        file.push(entry).expect("layout names are unique");
    }
    file
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub out_channels: usize,
    pub in_channels: usize,
    /// `out × in × 3 × 3 × 3`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    /// `out × in × 3 × 3`, kernel axes `(region, time)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub video: [Conv3d; 3],
    pub stmap: [Conv2d; 3],
    pub sdmu: [PdcWeights; 3],
    pub exchange: [ExchangeWeights; 3],
    pub decoder: DecoderWeights,
}

struct Source<'a> {
    file: &'a NamedTensorFile,
}

impl Source<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        self.file
            .get(name)
            .expect("presence checked against the layout")
            .data
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: self.get(name),
        }
    }

    fn linear(&self, prefix: &str, w: &str, b: &str, rows: usize, cols: usize) -> Linear {
        Linear {
            weight: self.matrix(&format!("{prefix}.{w}"), rows, cols),
            bias: self.get(&format!("{prefix}.{b}")),
        }
    }
}

impl ModelWeights {
    pub fn init(seed: u64, cfg: &ModelConfig) -> Self {
        Self::from_tensor_file(&init_weight_file(seed, cfg), cfg).expect("fresh weights match their layout")
    }

    /// Checks names, shapes and finiteness against the layout for `cfg`.
    pub fn from_tensor_file(file: &NamedTensorFile, cfg: &ModelConfig) -> Result<Self> {
        let layout = param_layout(cfg);
        let missing: Vec<String> = layout
            .iter()
            .filter(|s| file.get(&s.name).is_none())
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteWeights(missing));
        }
        let known: BTreeSet<&str> = layout.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = file.entries().iter().find(|e| !known.contains(e.name.as_str())) {
            return Err(Error::CorruptFile(format!("unexpected tensor {:?}", extra.name)));
        }
        for spec in &layout {
            let e = file.get(&spec.name).expect("checked above");
            if e.dims != spec.dims {
                return Err(Error::CorruptFile(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    spec.name, e.dims, spec.dims
                )));
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptFile(format!("tensor {:?} holds non-finite values", spec.name)));
            }
        }

        let src = Source { file };
        let ch = cfg.channels;
        let ins = [3, ch[0], ch[1]];
        let video = std::array::from_fn(|k| Conv3d {
            out_channels: ch[k],
            in_channels: ins[k],
            weight: src.get(&format!("video.{}.w", STAGES[k])),
            bias: src.get(&format!("video.{}.b", STAGES[k])),
        });
        let stmap = std::array::from_fn(|k| Conv2d {
            out_channels: ch[k],
            in_channels: ins[k],
            weight: src.get(&format!("stmap.{}.w", STAGES[k])),
            bias: src.get(&format!("stmap.{}.b", STAGES[k])),
        });
        let sdmu = std::array::from_fn(|k| PdcWeights {
            out_channels: ch[k],
            in_channels: ch[k],
            wc: src.get(&format!("sdmu.{k}.Wc")),
            wr: src.get(&format!("sdmu.{k}.Wr")),
            wf: src.get(&format!("sdmu.{k}.Wf")),
        });
        let exchange = std::array::from_fn(|k| {
            let c = ch[k];
            let p = format!("dceb.{}", SCALES[k]);
            ExchangeWeights {
                grid: cfg.grid,
                m0: src.get(&format!("{p}.M0")),
                mlp_hidden: src.linear(&p, "mlp_s2v.w1", "mlp_s2v.b1", c, c),
                mlp_out: src.linear(&p, "mlp_s2v.w2", "mlp_s2v.b2", 1, c),
                conv_v2s: src.get(&format!("{p}.conv_v2s")),
                proj_tilde_s: src.matrix(&format!("{p}.proj_tilde_s"), c, c),
                proj_tilde_v: src.matrix(&format!("{p}.proj_tilde_v"), c, c),
                alpha_s2v: src.get(&format!("{p}.alpha_s2v")),
                alpha_v2s: src.get(&format!("{p}.alpha_v2s")),
            }
        });
        let d = cfg.decoder.d_model;
        let c = ch[2];
        let p = "decoder";
        let norm = |name: &str| LayerNorm {
            gamma: src.get(&format!("decoder.{name}.gamma")),
            beta: src.get(&format!("decoder.{name}.beta")),
            eps: LayerNorm::EPS,
        };
        let decoder = DecoderWeights {
            proj_video: src.linear(p, "proj_v.w", "proj_v.b", d, c),
            proj_stmap: src.linear(p, "proj_s.w", "proj_s.b", d, c),
            state: src.linear(p, "state.w", "state.b", d, 4),
            queries: src.matrix("decoder.queries", cfg.decoder.queries, d),
            attention: AttentionWeights {
                heads: cfg.decoder.heads,
                query: src.linear(p, "attn.wq", "attn.bq", d, d),
                key: src.linear(p, "attn.wk", "attn.bk", d, d),
                value: src.linear(p, "attn.wv", "attn.bv", d, d),
                output: src.linear(p, "attn.wo", "attn.bo", d, d),
            },
            norm1: norm("ln1"),
            ffn_in: src.linear(p, "ffn.w1", "ffn.b1", 4 * d, d),
            ffn_out: src.linear(p, "ffn.w2", "ffn.b2", d, 4 * d),
            norm2: norm("ln2"),
            gate: src.linear(p, "gate.w", "gate.b", 2, d),
            query_head: src.linear(p, "query_head.w", "query_head.b", d, d),
            out_head: src.linear(p, "out_head.w", "out_head.b", 1, d),
            lambda: src.get("decoder.lambda")[0],
            tau: src.get("decoder.tau")[0],
        };
        if decoder.lambda < 0.0 {
            return Err(invalid("decoder.lambda must be non-negative"));
        }
        Ok(Self {
            config: *cfg,
            video,
            stmap,
            sdmu,
            exchange,
            decoder,
        })
    }

    pub fn to_tensor_file(&self) -> NamedTensorFile {
        let mut values: Vec<(String, Vec<f64>)> = Vec::new();
        let mut put = |name: String, v: &[f64]| values.push((name, v.to_vec()));
        for (k, stage) in STAGES.iter().enumerate() {
            put(format!("video.{stage}.w"), &self.video[k].weight);
            put(format!("video.{stage}.b"), &self.video[k].bias);
            put(format!("stmap.{stage}.w"), &self.stmap[k].weight);
            put(format!("stmap.{stage}.b"), &self.stmap[k].bias);
            put(format!("sdmu.{k}.Wc"), &self.sdmu[k].wc);
            put(format!("sdmu.{k}.Wr"), &self.sdmu[k].wr);
            put(format!("sdmu.{k}.Wf"), &self.sdmu[k].wf);
            let x = &self.exchange[k];
            let p = format!("dceb.{}", SCALES[k]);
            put(format!("{p}.M0"), &x.m0);
            put(format!("{p}.mlp_s2v.w1"), &x.mlp_hidden.weight.data);
            put(format!("{p}.mlp_s2v.b1"), &x.mlp_hidden.bias);
            put(format!("{p}.mlp_s2v.w2"), &x.mlp_out.weight.data);
            put(format!("{p}.mlp_s2v.b2"), &x.mlp_out.bias);
            put(format!("{p}.conv_v2s"), &x.conv_v2s);
            put(format!("{p}.proj_tilde_s"), &x.proj_tilde_s.data);
            put(format!("{p}.proj_tilde_v"), &x.proj_tilde_v.data);
            put(format!("{p}.alpha_s2v"), &x.alpha_s2v);
            put(format!("{p}.alpha_v2s"), &x.alpha_v2s);
        }
        let d = &self.decoder;
        let mut lin = |name: &str, w: &str, b: &str, l: &Linear| {
            put(format!("decoder.{name}.{w}"), &l.weight.data);
            put(format!("decoder.{name}.{b}"), &l.bias);
        };
        lin("proj_v", "w", "b", &d.proj_video);
        lin("proj_s", "w", "b", &d.proj_stmap);
        lin("state", "w", "b", &d.state);
        lin("attn", "wq", "bq", &d.attention.query);
        lin("attn", "wk", "bk", &d.attention.key);
        lin("attn", "wv", "bv", &d.attention.value);
        lin("attn", "wo", "bo", &d.attention.output);
        lin("ffn", "w1", "b1", &d.ffn_in);
        lin("ffn", "w2", "b2", &d.ffn_out);
        lin("gate", "w", "b", &d.gate);
        lin("query_head", "w", "b", &d.query_head);
        lin("out_head", "w", "b", &d.out_head);
        values.push(("decoder.queries".into(), d.queries.data.clone()));
        values.push(("decoder.ln1.gamma".into(), d.norm1.gamma.clone()));
        values.push(("decoder.ln1.beta".into(), d.norm1.beta.clone()));
        values.push(("decoder.ln2.gamma".into(), d.norm2.gamma.clone()));
        values.push(("decoder.ln2.beta".into(), d.norm2.beta.clone()));
        values.push(("decoder.lambda".into(), vec![d.lambda]));
        values.push(("decoder.tau".into(), vec![d.tau]));

        let mut file = NamedTensorFile::new();
        for spec in param_layout(&self.config) {
            let data = values
                .iter()
                .find(|(n, _)| *n == spec.name)
                .map(|(_, v)| v.iter().map(|&x| x as f32).collect())
                .expect("every layout entry is exported");
            file.push(TensorEntry::new(spec.name, spec.dims, data).expect("shapes follow the layout"))
                .expect("unique names");
        }
        file
    }

    pub fn param_count(&self) -> usize {
        param_layout(&self.config).iter().map(ParamSpec::len).sum()
    }
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    write_tensor(&w.to_tensor_file(), path)
}

pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::from_tensor_file(&read_tensor(path)?, cfg)
}
