//! Finite-difference checks of the network components and losses.

use implantformer::autograd::{Graph, Real, Tensor, Var};
use implantformer::heatmap::{encode_target, focal_loss, offset_loss, LossConfig};
use implantformer::network::{layers, ModelParams, NetConfig, ParamVars, FusionMode, ReadMode};
use rand::Rng;

use super::{names_with, numeric_gradient, rel_err, rng, toy_config, uniform};

const H: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comp {
    Stem,
    Block,
    Reassemble,
    Fusion,
    Heads,
    Network,
}

pub const COMPONENTS: [Comp; 6] = [Comp::Stem, Comp::Block, Comp::Reassemble, Comp::Fusion, Comp::Heads, Comp::Network];

/// One seeded check instance: configuration, perturbed parameters, the
/// parameters under test and the component inputs.
pub struct Case {
    pub comp: Comp,
    pub cfg: NetConfig,
    pub index: usize,
    pub params: ModelParams<f64>,
    pub names: Vec<String>,
    pub inputs: Vec<Tensor<f64>>,
}

impl Case {
    pub fn new(comp: Comp, seed: u64) -> Self {
        let mut r = rng(seed.wrapping_mul(31).wrapping_add(comp as u64));
        let mut cfg = toy_config();
        let mut index = 0;
        let (prefix, inputs): (String, Vec<Vec<usize>>) = match comp {
            Comp::Stem => ("stem.".into(), vec![vec![1, 3, 8, 8]]),
            Comp::Block => ("enc.0.".into(), vec![vec![1, 5, 8]]),
            Comp::Reassemble => {
                cfg.layers = 4;
                cfg.taps = vec![1, 2, 3, 4];
                cfg.ratios = vec![1, 2, 4, 8];
                cfg.read = [ReadMode::Ignore, ReadMode::Add, ReadMode::Project][seed as usize % 3];
                index = (seed as usize / 3) % 4;
                (format!("reassemble.{}.", index), vec![vec![1, 17, 8]])
            }
            Comp::Fusion => {
                cfg.fusion = [FusionMode::Concat, FusionMode::Add][seed as usize % 2];
                ("fuse.".into(), vec![vec![1, 3, 4, 4], vec![1, 3, 8, 8]])
            }
            Comp::Heads => ("head.".into(), vec![vec![1, 3, 8, 8]]),
            Comp::Network => {
                if seed % 2 == 1 {
                    cfg = cfg.ablated();
                }
                (String::new(), vec![vec![1, 3, 16, 16]])
            }
        };
        let mut params: ModelParams<f64> = ModelParams::init(&cfg, seed).unwrap();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.2..0.2);
            }
        }
        let names = names_with(&params, &[prefix.as_str()]);
        let inputs = inputs.iter().map(|s| uniform(s, -1.0, 1.0, &mut r)).collect();
        Self { comp, cfg, index, params, names, inputs }
    }

    fn run<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, xs: &[Var]) -> Var {
        let cfg = &self.cfg;
        match self.comp {
            Comp::Stem => layers::conv_stem_forward(g, p, xs[0]).unwrap(),
            Comp::Block => layers::mhsa_block(g, p, 0, xs[0], cfg.heads).unwrap().0,
            Comp::Reassemble => layers::reassemble(g, p, self.index, xs[0], cfg).unwrap(),
            Comp::Fusion => layers::decoder_fuse(g, p, xs, cfg).unwrap(),
            Comp::Heads => {
                let (heat, off) = layers::heads(g, p, xs[0]).unwrap();
                g.concat_channels(heat, off).unwrap()
            }
            Comp::Network => {
                let (heat, off, _) = implantformer::network::build(g, p, xs[0], cfg).unwrap();
                g.concat_channels(heat, off).unwrap()
            }
        }
    }

    /// Output of the component in `T` precision.
    fn output<T: Real>(&self, params: &ModelParams<T>, inputs: &[Tensor<T>]) -> (Graph<T>, ParamVars, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = self.run(&mut g, &vars, &xs);
        (g, vars, xs, out)
    }

    fn probe_value(&self, params: &ModelParams<f64>, inputs: &[Tensor<f64>], probe: &[f64]) -> f64 {
        let (g, _, _, out) = self.output(params, inputs);
        g.value(out).data().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    /// Analytic gradients of `Σ probe ⊙ output` in `T` precision for the
    /// tested parameters followed by the inputs, as f64 vectors.
    fn analytic<T: Real>(&self, probe: &Tensor<f64>) -> Vec<Vec<f64>> {
        let params: ModelParams<T> = self.params.cast();
        let inputs: Vec<Tensor<T>> = self.inputs.iter().map(|x| x.cast()).collect();
        let (g, vars, xs, out) = self.output(&params, &inputs);
        let grads = g.backward(&[(out, probe.cast())]).unwrap();
        let as_f64 = |v: Var, len: usize| {
            grads
                .get(v)
                .map(|t| t.data().iter().map(|x| x.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; len])
        };
        let mut out: Vec<Vec<f64>> = self
            .names
            .iter()
            .map(|n| as_f64(vars.get(n).unwrap(), params.get(n).unwrap().len()))
            .collect();
        out.extend(xs.iter().zip(&inputs).map(|(&v, x)| as_f64(v, x.len())));
        out
    }

    /// The case with every parameter and input rounded to f32.
    fn rounded(&self) -> Self {
        let p32: ModelParams<f32> = self.params.cast();
        Self {
            comp: self.comp,
            cfg: self.cfg.clone(),
            index: self.index,
            params: p32.cast(),
            names: self.names.clone(),
            inputs: self.inputs.iter().map(|x| x.cast::<f32>().cast()).collect(),
        }
    }

    fn probe(&self, seed: u64) -> Tensor<f64> {
        let (g, _, _, out) = self.output(&self.params, &self.inputs);
        let p = uniform(g.shape(out), -1.0, 1.0, &mut rng(seed));
        // f32-representable so both precisions see the same probe
        p.cast::<f32>().cast()
    }

    /// Element-wise central differences for every tested parameter and
    /// every input.
    fn numeric(&self, probe: &Tensor<f64>) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .names
            .iter()
            .map(|name| {
                let base = self.params.get(name).unwrap().data().to_vec();
                let mut p = self.params.clone();
                numeric_gradient(&base, H, |v| {
                    p.get_mut(name).unwrap().data_mut().copy_from_slice(v);
                    self.probe_value(&p, &self.inputs, probe.data())
                })
            })
            .collect();
        for i in 0..self.inputs.len() {
            let base = self.inputs[i].data().to_vec();
            let mut xs = self.inputs.clone();
            out.push(numeric_gradient(&base, H, |v| {
                xs[i].data_mut().copy_from_slice(v);
                self.probe_value(&self.params, &xs, probe.data())
            }));
        }
        out
    }

    /// Directional derivatives along one seeded random direction per
    /// parameter tensor (and per input), by central differences.
    fn numeric_directional(&self, probe: &Tensor<f64>, dirs: &[Vec<f64>]) -> Vec<f64> {
        let n = self.names.len();
        (0..dirs.len())
            .map(|k| {
                let eval = |sign: f64| {
                    let mut p = self.params.clone();
                    let mut xs = self.inputs.clone();
                    let t = if k < n { p.get_mut(&self.names[k]).unwrap() } else { &mut xs[k - n] };
                    for (v, d) in t.data_mut().iter_mut().zip(&dirs[k]) {
                        *v += sign * H * d;
                    }
                    self.probe_value(&p, &xs, probe.data())
                };
                (eval(1.0) - eval(-1.0)) / (2.0 * H)
            })
            .collect()
    }

    fn directions(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng(seed ^ 0x5eed);
        let lens = self
            .names
            .iter()
            .map(|n| self.params.get(n).unwrap().len())
            .chain(self.inputs.iter().map(|x| x.len()));
        lens.map(|l| (0..l).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
    }
}

fn worst(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative errors `(f64, f32)` of one instance. `elementwise`
/// compares every scalar; otherwise one random direction per tensor.
pub fn check_case(comp: Comp, seed: u64, elementwise: bool) -> (f64, f64) {
    let case = Case::new(comp, seed).rounded();
    let probe = case.probe(seed);
    let a64 = case.analytic::<f64>(&probe);
    let a32 = case.analytic::<f32>(&probe);
    if elementwise {
        let num = case.numeric(&probe);
        (worst(&a64, &num), worst(&a32, &num))
    } else {
        let dirs = case.directions(seed);
        let num = case.numeric_directional(&probe, &dirs);
        let d64: Vec<f64> = a64.iter().zip(&dirs).map(|(a, d)| dot(a, d)).collect();
        let d32: Vec<f64> = a32.iter().zip(&dirs).map(|(a, d)| dot(a, d)).collect();
        (rel_err(&d64, &num), rel_err(&d32, &num))
    }
}

/// Worst `(f64, f32)` errors of the focal loss on one random heatmap.
pub fn check_focal(seed: u64) -> (f64, f64) {
    let mut r = rng(seed ^ 0xf0ca1);
    let (w, h) = (6, 5);
    let kps: Vec<(f64, f64)> = (0..r.gen_range(1..3)).map(|_| (r.gen_range(0.0..24.0), r.gen_range(0.0..20.0))).collect();
    let target = encode_target(&kps, 4 * w, 4 * h, 4, r.gen_range(1.0..3.0)).unwrap();
    let n = target.keypoint_count();
    let pred: Vec<f64> = (0..w * h).map(|_| r.gen_range(0.02f32..0.98) as f64).collect();
    let cfg = LossConfig::default();
    let (_, g64) = focal_loss(&pred, &target.heatmap, n, &cfg).unwrap();
    let t32: Vec<f32> = target.heatmap.iter().map(|&v| v as f32).collect();
    let p32: Vec<f32> = pred.iter().map(|&v| v as f32).collect();
    let (_, g32) = focal_loss(&p32, &t32, n, &cfg).unwrap();
    let g32: Vec<f64> = g32.iter().map(|&v| v as f64).collect();
    let num = numeric_gradient(&pred, H, |p| focal_loss(p, &target.heatmap, n, &cfg).unwrap().0);
    (rel_err(&g64, &num), rel_err(&g32, &num))
}

/// Worst `(f64, f32)` errors of the offset loss away from its kinks.
pub fn check_offset(seed: u64) -> (f64, f64) {
    let mut r = rng(seed ^ 0x0ff5e7);
    let (batch, cells) = (2, 12);
    let mut mask: Vec<bool> = (0..batch * cells).map(|_| r.gen_bool(0.3)).collect();
    mask[r.gen_range(0..batch * cells)] = true;
    let target: Vec<f64> = (0..2 * batch * cells).map(|_| r.gen_range(0.0f32..1.0) as f64).collect();
    let pred: Vec<f64> = target
        .iter()
        .map(|&t| {
            let d = r.gen_range(0.01f32..0.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            (t as f32 + d) as f64
        })
        .collect();
    let (_, g64) = offset_loss(&pred, &target, &mask, cells).unwrap();
    let p32: Vec<f32> = pred.iter().map(|&v| v as f32).collect();
    let t32: Vec<f32> = target.iter().map(|&v| v as f32).collect();
    let (_, g32) = offset_loss(&p32, &t32, &mask, cells).unwrap();
    let g32: Vec<f64> = g32.iter().map(|&v| v as f64).collect();
    let num = numeric_gradient(&pred, H, |p| offset_loss(p, &target, &mask, cells).unwrap().0);
    (rel_err(&g64, &num), rel_err(&g32, &num))
}

#[derive(Debug)]
pub struct SuiteRow {
    pub name: &'static str,
    pub instances: usize,
    pub worst_f64: f64,
    pub worst_f32: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.worst_f64 < 1e-6 && self.worst_f32 < 1e-4
    }
}

fn row(name: &'static str, instances: usize, f: impl Fn(u64) -> (f64, f64)) -> SuiteRow {
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for seed in 0..instances as u64 {
        let (a, b) = f(seed);
        w64 = w64.max(a);
        w32 = w32.max(b);
    }
    SuiteRow {
        name,
        instances,
        worst_f64: w64,
        worst_f32: w32,
    }
}

/// Every component and both losses over `instances` seeded cases; the
/// full network is checked directionally, plus once element-wise.
pub fn gradient_suite(instances: usize) -> Vec<SuiteRow> {
    let mut rows = vec![
        row("stem", instances, |s| check_case(Comp::Stem, s, true)),
        row("encoder block", instances, |s| check_case(Comp::Block, s, true)),
        row("reassemble", instances, |s| check_case(Comp::Reassemble, s, true)),
        row("fusion", instances, |s| check_case(Comp::Fusion, s, true)),
        row("heads", instances, |s| check_case(Comp::Heads, s, true)),
        row("focal loss", instances, check_focal),
        row("offset loss", instances, check_offset),
        row("network (directional)", instances, |s| check_case(Comp::Network, s, false)),
    ];
    rows.push(row("network (element-wise)", 1, |s| check_case(Comp::Network, s, true)));
    rows
}
