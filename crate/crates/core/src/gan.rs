//! Two-generator / two-discriminator unpaired volume translation: network
//! construction, Adam optimization, the forward/backward-cycle training
//! step, in-memory training loop, inference, and checkpoint state.
//!
//! Networks are stored as flat parameter lists plus a small layer program
//! interpreted against the autograd graph, which keeps parameter naming,
//! counting and checkpointing uniform across all four networks.

use crate::autograd::{Activation, AutogradError, Graph, TensorId};
use crate::losses::{
    adversarial_loss, cycle_loss, gc_loss, generator_adversarial, LossError, LossReport,
    LossWeights,
};
use crate::rng::{derive_seed, Rng};
use crate::volume::Volume;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum GanError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("spatial dims {dims:?} not divisible by {divisor}")]
    IndivisibleDims {
        dims: (usize, usize, usize),
        divisor: usize,
    },
    #[error("invalid network config: {0}")]
    BadConfig(&'static str),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("checkpoint does not match configs: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_down: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            n_res_blocks: 4,
            n_down: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 16,
            n_layers: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub history_buffer: usize,
    /// Use the saturating minimax generator loss instead of the
    /// non-saturating default.
    pub saturating_generator_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            history_buffer: 16,
            saturating_generator_loss: false,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, rng: Option<&mut Rng>) -> Self {
        let n: usize = shape.iter().product();
        let data = match rng {
            Some(rng) => (0..n).map(|_| (rng.normal() * 0.02) as f32).collect(),
            None => vec![0.0; n],
        };
        Param { name, shape, data }
    }

    fn ones(name: String, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name,
            shape,
            data: vec![1.0; n],
        }
    }
}

/// One interpreted step of a network's forward program. Indices refer into
/// the network's parameter list.
#[derive(Debug, Clone, PartialEq)]
enum Step {
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvT {
        w: usize,
        stride: usize,
        pad: usize,
    },
    Norm {
        gamma: usize,
        beta: usize,
    },
    Act(Activation),
    PushSkip,
    AddSkip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: Vec<Param>,
    steps: Vec<Step>,
    /// Spatial dims must be divisible by this for the output shape to
    /// round-trip (generators only; 1 for discriminators).
    pub required_divisor: usize,
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Insert every parameter as a graph leaf and return the ids in
    /// parameter order.
    pub fn insert_params(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.leaf(&p.shape, p.data.clone(), trainable))
            .collect()
    }

    /// Run the layer program. `ids` must come from `insert_params`.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        ids: &[TensorId],
        input: TensorId,
    ) -> Result<TensorId, AutogradError> {
        let mut x = input;
        let mut skips: Vec<TensorId> = Vec::new();
        for step in &self.steps {
            x = match *step {
                Step::Conv { w, b, stride, pad } => {
                    g.conv3d(x, ids[w], Some(ids[b]), stride, pad)?
                }
                Step::ConvT { w, stride, pad } => g.conv3d_transpose(x, ids[w], stride, pad)?,
                Step::Norm { gamma, beta } => {
                    g.instance_norm3d(x, ids[gamma], ids[beta], NORM_EPS)?
                }
                Step::Act(kind) => g.activation(x, kind),
                Step::PushSkip => {
                    skips.push(x);
                    x
                }
                Step::AddSkip => {
                    let s = skips.pop().expect("unbalanced skip");
                    g.add(x, s)?
                }
            };
        }
        Ok(x)
    }
}

struct NetBuilder {
    params: Vec<Param>,
    steps: Vec<Step>,
    prefix: &'static str,
}

impl NetBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, rng: Option<&mut Rng>) -> usize {
        self.params.push(Param::new(
            format!("{}.{}", self.prefix, name),
            shape,
            rng,
        ));
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) {
        let w = self.param(format!("{name}.weight"), vec![cout, cin, k, k, k], Some(rng));
        let b = self.param(format!("{name}.bias"), vec![cout], None);
        self.steps.push(Step::Conv { w, b, stride, pad });
    }

    fn norm(&mut self, name: &str, c: usize) {
        let gamma = self.params.len();
        self.params.push(Param::ones(
            format!("{}.{name}.gamma", self.prefix),
            vec![c],
        ));
        let beta = self.param(format!("{name}.beta"), vec![c], None);
        self.steps.push(Step::Norm { gamma, beta });
    }
}

/// Residual encoder-decoder generator with tanh output; output spatial dims
/// equal input dims whenever they are divisible by `2^n_down`.
pub fn build_generator(
    cfg: &GeneratorConfig,
    prefix: &'static str,
    rng: &mut Rng,
) -> Result<Network, GanError> {
    if cfg.base_channels < 1 {
        return Err(GanError::BadConfig("base_channels must be >= 1"));
    }
    if cfg.n_down < 1 {
        return Err(GanError::BadConfig("n_down must be >= 1"));
    }
    let mut b = NetBuilder {
        params: Vec::new(),
        steps: Vec::new(),
        prefix,
    };
    let c = cfg.base_channels;
    b.conv("stem", 1, c, 3, 1, 1, rng);
    b.norm("stem", c);
    b.steps.push(Step::Act(Activation::Relu));
    let mut ch = c;
    for i in 0..cfg.n_down {
        let name = format!("down{i}");
        b.conv(&name, ch, ch * 2, 3, 2, 1, rng);
        b.norm(&name, ch * 2);
        b.steps.push(Step::Act(Activation::Relu));
        ch *= 2;
    }
    for r in 0..cfg.n_res_blocks {
        b.steps.push(Step::PushSkip);
        let n1 = format!("res{r}.conv1");
        b.conv(&n1, ch, ch, 3, 1, 1, rng);
        b.norm(&n1, ch);
        b.steps.push(Step::Act(Activation::Relu));
        let n2 = format!("res{r}.conv2");
        b.conv(&n2, ch, ch, 3, 1, 1, rng);
        b.norm(&n2, ch);
        b.steps.push(Step::AddSkip);
    }
    for i in 0..cfg.n_down {
        let name = format!("up{i}");
        // conv3d_transpose weight layout is [Cin_of_output_map = ch/2 second]
        let w = b.param(
            format!("{name}.weight"),
            vec![ch, ch / 2, 4, 4, 4],
            Some(rng),
        );
        b.steps.push(Step::ConvT {
            w,
            stride: 2,
            pad: 1,
        });
        b.norm(&name, ch / 2);
        b.steps.push(Step::Act(Activation::Relu));
        ch /= 2;
    }
    b.conv("out", ch, 1, 3, 1, 1, rng);
    b.steps.push(Step::Act(Activation::Tanh));
    Ok(Network {
        params: b.params,
        steps: b.steps,
        required_divisor: 1 << cfg.n_down,
    })
}

/// Patch discriminator: `n_layers` stride-2 convolutions with leaky ReLU
/// (instance norm from the second layer on), then a 1-channel convolution
/// and sigmoid producing a spatial probability map.
pub fn build_discriminator(
    cfg: &DiscriminatorConfig,
    prefix: &'static str,
    rng: &mut Rng,
) -> Result<Network, GanError> {
    if cfg.base_channels < 1 {
        return Err(GanError::BadConfig("base_channels must be >= 1"));
    }
    if cfg.n_layers < 1 {
        return Err(GanError::BadConfig("n_layers must be >= 1"));
    }
    let mut b = NetBuilder {
        params: Vec::new(),
        steps: Vec::new(),
        prefix,
    };
    let mut ch = 1;
    for i in 0..cfg.n_layers {
        let cout = cfg.base_channels << i;
        let name = format!("l{i}");
        b.conv(&name, ch, cout, 4, 2, 1, rng);
        if i > 0 {
            b.norm(&name, cout);
        }
        b.steps.push(Step::Act(Activation::LeakyRelu));
        ch = cout;
    }
    b.conv("out", ch, 1, 3, 1, 1, rng);
    b.steps.push(Step::Act(Activation::Sigmoid));
    Ok(Network {
        params: b.params,
        steps: b.steps,
        required_divisor: 1,
    })
}

/// The four networks of the translation system.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleGanModel {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub g_mr2ct: Network,
    pub g_ct2mr: Network,
    pub d_mr: Network,
    pub d_ct: Network,
}

impl CycleGanModel {
    pub fn new(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        seed: u64,
    ) -> Result<Self, GanError> {
        let mut r0 = Rng::from_seed(derive_seed(seed, &[0]));
        let mut r1 = Rng::from_seed(derive_seed(seed, &[1]));
        let mut r2 = Rng::from_seed(derive_seed(seed, &[2]));
        let mut r3 = Rng::from_seed(derive_seed(seed, &[3]));
        Ok(CycleGanModel {
            gen_cfg,
            disc_cfg,
            g_mr2ct: build_generator(&gen_cfg, "g_mr2ct", &mut r0)?,
            g_ct2mr: build_generator(&gen_cfg, "g_ct2mr", &mut r1)?,
            d_mr: build_discriminator(&disc_cfg, "d_mr", &mut r2)?,
            d_ct: build_discriminator(&disc_cfg, "d_ct", &mut r3)?,
        })
    }

    fn networks(&self) -> [&Network; 4] {
        [&self.g_mr2ct, &self.g_ct2mr, &self.d_mr, &self.d_ct]
    }

    fn networks_mut(&mut self) -> [&mut Network; 4] {
        [
            &mut self.g_mr2ct,
            &mut self.g_ct2mr,
            &mut self.d_mr,
            &mut self.d_ct,
        ]
    }
}

/// Translation direction for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    MrToCt,
    CtToMr,
}

fn check_divisible(dims: (usize, usize, usize), divisor: usize) -> Result<(), GanError> {
    if dims.0 % divisor != 0 || dims.1 % divisor != 0 || dims.2 % divisor != 0 {
        return Err(GanError::IndivisibleDims { dims, divisor });
    }
    Ok(())
}

/// Run one generator over a volume; geometry is preserved and values stay
/// in [-1, 1] via the tanh output.
pub fn translate(
    model: &CycleGanModel,
    v: &Volume,
    direction: Direction,
) -> Result<Volume, GanError> {
    let net = match direction {
        Direction::MrToCt => &model.g_mr2ct,
        Direction::CtToMr => &model.g_ct2mr,
    };
    check_divisible(v.dims(), net.required_divisor)?;
    let (nx, ny, nz) = v.dims();
    let mut g = Graph::new();
    let ids = net.insert_params(&mut g, false);
    // volume storage is x-fastest, which matches [N,C,D=nz,H=ny,W=nx]
    let input = g.constant(&[1, 1, nz, ny, nx], v.data().to_vec());
    let out = net.forward(&mut g, &ids, input)?;
    Ok(v.with_data(g.values(out).to_vec()).expect("shape-preserving"))
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        Adam {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, cfg: &TrainConfig, params: &mut [Param], grads: &[Option<&[f32]>]) {
        const EPS: f32 = 1e-8;
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - libm::powf(b1, self.t as f32);
        let bc2 = 1.0 - libm::powf(b2, self.t as f32);
        let lr = cfg.learning_rate;
        for (pi, p) in params.iter_mut().enumerate() {
            let Some(grad) = grads[pi] else { continue };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..p.data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (libm::sqrtf(vh) + EPS);
            }
        }
    }
}

/// Pool of recent fake volumes used for discriminator updates.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    pub capacity: usize,
    pub entries: Vec<(Vec<usize>, Vec<f32>)>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        HistoryBuffer {
            capacity,
            entries: Vec::new(),
        }
    }

    /// Insert a fake (evicting a seeded-random slot when full) and return a
    /// seeded-random entry for the discriminator to judge.
    pub fn push_and_sample(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        rng: &mut Rng,
    ) -> (Vec<usize>, Vec<f32>) {
        if self.entries.len() < self.capacity.max(1) {
            self.entries.push((shape, data));
        } else {
            let slot = rng.uniform_usize(self.entries.len());
            self.entries[slot] = (shape, data);
        }
        let pick = rng.uniform_usize(self.entries.len());
        self.entries[pick].clone()
    }
}

/// Mutable training state: model, per-network optimizers, history buffers,
/// step counter and RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: CycleGanModel,
    pub opts: [Adam; 4],
    pub history_mr: HistoryBuffer,
    pub history_ct: HistoryBuffer,
    pub step: u64,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        cfg: TrainConfig,
    ) -> Result<Self, GanError> {
        let model = CycleGanModel::new(gen_cfg, disc_cfg, cfg.seed)?;
        let opts = [
            Adam::new(&model.g_mr2ct.params),
            Adam::new(&model.g_ct2mr.params),
            Adam::new(&model.d_mr.params),
            Adam::new(&model.d_ct.params),
        ];
        let rng = Rng::from_seed(derive_seed(cfg.seed, &[100]));
        Ok(TrainState {
            history_mr: HistoryBuffer::new(cfg.history_buffer),
            history_ct: HistoryBuffer::new(cfg.history_buffer),
            step: 0,
            rng,
            cfg,
            model,
            opts,
        })
    }
}

fn volume_tensor(v: &Volume) -> (Vec<usize>, Vec<f32>) {
    let (nx, ny, nz) = v.dims();
    (vec![1, 1, nz, ny, nx], v.data().to_vec())
}

fn apply_grads(
    g: &Graph<f32>,
    ids: &[TensorId],
    net: &mut Network,
    opt: &mut Adam,
    cfg: &TrainConfig,
) {
    let grads: Vec<Option<&[f32]>> = ids.iter().map(|&id| g.grad(id)).collect();
    opt.step(cfg, &mut net.params, &grads);
}

/// One optimization step over a single (mr, ct) pair of normalized volumes:
/// forward + backward cycles, a generator update on the non-saturating
/// adversarial terms plus weighted cycle and gradient-consistency losses,
/// then discriminator updates against history-buffer fakes.
pub fn train_step(state: &mut TrainState, mr: &Volume, ct: &Volume) -> Result<LossReport, GanError> {
    check_divisible(mr.dims(), state.model.g_mr2ct.required_divisor)?;
    check_divisible(ct.dims(), state.model.g_ct2mr.required_divisor)?;
    let cfg = state.cfg;
    let w = cfg.weights;

    // ---- generator update ----
    let mut g = Graph::new();
    let ids_g_mr2ct = state.model.g_mr2ct.insert_params(&mut g, true);
    let ids_g_ct2mr = state.model.g_ct2mr.insert_params(&mut g, true);
    let ids_d_mr = state.model.d_mr.insert_params(&mut g, false);
    let ids_d_ct = state.model.d_ct.insert_params(&mut g, false);
    let (mr_shape, mr_data) = volume_tensor(mr);
    let (ct_shape, ct_data) = volume_tensor(ct);
    let real_mr = g.constant(&mr_shape, mr_data);
    let real_ct = g.constant(&ct_shape, ct_data);

    let fake_ct = state.model.g_mr2ct.forward(&mut g, &ids_g_mr2ct, real_mr)?;
    let rec_mr = state.model.g_ct2mr.forward(&mut g, &ids_g_ct2mr, fake_ct)?;
    let fake_mr = state.model.g_ct2mr.forward(&mut g, &ids_g_ct2mr, real_ct)?;
    let rec_ct = state.model.g_mr2ct.forward(&mut g, &ids_g_mr2ct, fake_mr)?;

    let d_fake_ct = state.model.d_ct.forward(&mut g, &ids_d_ct, fake_ct)?;
    let d_fake_mr = state.model.d_mr.forward(&mut g, &ids_d_mr, fake_mr)?;
    let adv_g_ct = generator_adversarial(&mut g, d_fake_ct, cfg.saturating_generator_loss)?;
    let adv_g_mr = generator_adversarial(&mut g, d_fake_mr, cfg.saturating_generator_loss)?;
    let cycle = cycle_loss(&mut g, real_ct, rec_ct, real_mr, rec_mr)?;
    let gc = gc_loss(&mut g, real_ct, fake_mr, real_mr, fake_ct)?;
    let adv_sum = g.add(adv_g_ct, adv_g_mr)?;
    let wc = g.scalar_mul(cycle, w.lambda_cycle as f32);
    let wg = g.scalar_mul(gc, w.gamma_gc as f32);
    let partial = g.add(adv_sum, wc)?;
    let gen_total = g.add(partial, wg)?;
    g.backward(gen_total)?;

    // reported adversarial values follow the discriminator form on the
    // fresh fakes, before any update
    let d_real_ct = state.model.d_ct.forward(&mut g, &ids_d_ct, real_ct)?;
    let d_real_mr = state.model.d_mr.forward(&mut g, &ids_d_mr, real_mr)?;
    let adv_ct_rep = adversarial_loss(&mut g, d_real_ct, d_fake_ct)?;
    let adv_mr_rep = adversarial_loss(&mut g, d_real_mr, d_fake_mr)?;
    let report = LossReport::compose(
        g.scalar_value(adv_ct_rep) as f64,
        g.scalar_value(adv_mr_rep) as f64,
        g.scalar_value(cycle) as f64,
        g.scalar_value(gc) as f64,
        &w,
    );
    let finite = [
        report.adv_ct,
        report.adv_mr,
        report.cycle,
        report.gc,
        report.total,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        return Err(GanError::Diverged { step: state.step });
    }

    let fake_ct_data = g.values(fake_ct).to_vec();
    let fake_ct_shape = g.shape(fake_ct).to_vec();
    let fake_mr_data = g.values(fake_mr).to_vec();
    let fake_mr_shape = g.shape(fake_mr).to_vec();

    apply_grads(&g, &ids_g_mr2ct, &mut state.model.g_mr2ct, &mut state.opts[0], &cfg);
    apply_grads(&g, &ids_g_ct2mr, &mut state.model.g_ct2mr, &mut state.opts[1], &cfg);
    drop(g);

    // ---- discriminator updates on real vs history fakes ----
    let (hist_ct_shape, hist_ct) =
        state
            .history_ct
            .push_and_sample(fake_ct_shape, fake_ct_data, &mut state.rng);
    let (hist_mr_shape, hist_mr) =
        state
            .history_mr
            .push_and_sample(fake_mr_shape, fake_mr_data, &mut state.rng);

    {
        let mut g = Graph::new();
        let ids = state.model.d_ct.insert_params(&mut g, true);
        let (shape, data) = volume_tensor(ct);
        let real = g.constant(&shape, data);
        let fake = g.constant(&hist_ct_shape, hist_ct);
        let d_real = state.model.d_ct.forward(&mut g, &ids, real)?;
        let d_fake = state.model.d_ct.forward(&mut g, &ids, fake)?;
        let adv = adversarial_loss(&mut g, d_real, d_fake)?;
        let loss = g.neg(adv);
        g.backward(loss)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(GanError::Diverged { step: state.step });
        }
        apply_grads(&g, &ids, &mut state.model.d_ct, &mut state.opts[3], &cfg);
    }
    {
        let mut g = Graph::new();
        let ids = state.model.d_mr.insert_params(&mut g, true);
        let (shape, data) = volume_tensor(mr);
        let real = g.constant(&shape, data);
        let fake = g.constant(&hist_mr_shape, hist_mr);
        let d_real = state.model.d_mr.forward(&mut g, &ids, real)?;
        let d_fake = state.model.d_mr.forward(&mut g, &ids, fake)?;
        let adv = adversarial_loss(&mut g, d_real, d_fake)?;
        let loss = g.neg(adv);
        g.backward(loss)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(GanError::Diverged { step: state.step });
        }
        apply_grads(&g, &ids, &mut state.model.d_mr, &mut state.opts[2], &cfg);
    }

    state.step += 1;
    Ok(report)
}

/// In-memory training loop: per step, draw one volume per domain uniformly
/// (seeded) and run `train_step`; the callback observes the state after
/// each step. Resumes from `state.step` up to `state.cfg.steps`.
pub fn train<F>(
    state: &mut TrainState,
    mr_corpus: &[Volume],
    ct_corpus: &[Volume],
    mut on_step: F,
) -> Result<(), GanError>
where
    F: FnMut(&TrainState, &LossReport),
{
    if mr_corpus.is_empty() || ct_corpus.is_empty() {
        return Err(GanError::EmptyCorpus);
    }
    while state.step < state.cfg.steps {
        let mi = state.rng.uniform_usize(mr_corpus.len());
        let ci = state.rng.uniform_usize(ct_corpus.len());
        let report = train_step(state, &mr_corpus[mi], &ct_corpus[ci])?;
        on_step(state, &report);
    }
    Ok(())
}

/// Structured checkpoint contents: serialization to bytes lives with the
/// file-format layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub version: u32,
    pub step: u64,
    pub params: Vec<Param>,
    pub moments: Vec<Param>,
    pub rng_state: [u8; 32],
}

impl TrainState {
    pub fn to_checkpoint(&self) -> CheckpointState {
        let mut params = Vec::new();
        for net in self.model.networks() {
            params.extend(net.params.iter().cloned());
        }
        let mut moments = Vec::new();
        for (net, opt) in self.model.networks().into_iter().zip(&self.opts) {
            for (pi, p) in net.params.iter().enumerate() {
                moments.push(Param {
                    name: format!("adam.{}.m", p.name),
                    shape: p.shape.clone(),
                    data: opt.m[pi].clone(),
                });
                moments.push(Param {
                    name: format!("adam.{}.v", p.name),
                    shape: p.shape.clone(),
                    data: opt.v[pi].clone(),
                });
            }
            let prefix = &net.params[0].name[..net.params[0].name.find('.').unwrap()];
            moments.push(Param {
                name: format!("adam.{prefix}.t"),
                shape: vec![1],
                data: vec![opt.t as f32],
            });
        }
        for (dom, hist) in [("mr", &self.history_mr), ("ct", &self.history_ct)] {
            for (i, (shape, data)) in hist.entries.iter().enumerate() {
                moments.push(Param {
                    name: format!("history.{dom}.{i}"),
                    shape: shape.clone(),
                    data: data.clone(),
                });
            }
        }
        CheckpointState {
            version: CHECKPOINT_VERSION,
            step: self.step,
            params,
            moments,
            rng_state: self.rng.state_bytes(),
        }
    }

    /// Rebuild a state that continues exactly where the checkpointed run
    /// left off. The configs must describe the checkpointed architecture.
    pub fn from_checkpoint(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        cfg: TrainConfig,
        ck: &CheckpointState,
    ) -> Result<Self, GanError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(GanError::CheckpointMismatch(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let mut state = TrainState::new(gen_cfg, disc_cfg, cfg)?;
        let find = |list: &[Param], name: &str| -> Option<Param> {
            list.iter().find(|p| p.name == name).cloned()
        };
        for net in state.model.networks_mut() {
            for p in net.params.iter_mut() {
                let src = find(&ck.params, &p.name).ok_or_else(|| {
                    GanError::CheckpointMismatch(format!("missing parameter {}", p.name))
                })?;
                if src.shape != p.shape {
                    return Err(GanError::CheckpointMismatch(format!(
                        "shape of {} is {:?}, expected {:?}",
                        p.name, src.shape, p.shape
                    )));
                }
                p.data = src.data;
            }
        }
        let nets = state.model.networks();
        for (ni, net) in nets.into_iter().enumerate() {
            for (pi, p) in net.params.iter().enumerate() {
                let m = find(&ck.moments, &format!("adam.{}.m", p.name)).ok_or_else(|| {
                    GanError::CheckpointMismatch(format!("missing moment for {}", p.name))
                })?;
                let v = find(&ck.moments, &format!("adam.{}.v", p.name)).ok_or_else(|| {
                    GanError::CheckpointMismatch(format!("missing moment for {}", p.name))
                })?;
                if m.data.len() != p.data.len() || v.data.len() != p.data.len() {
                    return Err(GanError::CheckpointMismatch(format!(
                        "moment size mismatch for {}",
                        p.name
                    )));
                }
                state.opts[ni].m[pi] = m.data;
                state.opts[ni].v[pi] = v.data;
            }
            let prefix = &net.params[0].name[..net.params[0].name.find('.').unwrap()];
            let t = find(&ck.moments, &format!("adam.{prefix}.t")).ok_or_else(|| {
                GanError::CheckpointMismatch(format!("missing adam.{prefix}.t"))
            })?;
            state.opts[ni].t = t.data[0] as u64;
        }
        for (dom, hist) in [
            ("mr", &mut state.history_mr),
            ("ct", &mut state.history_ct),
        ] {
            let mut i = 0;
            while let Some(e) = find(&ck.moments, &format!("history.{dom}.{i}")) {
                hist.entries.push((e.shape, e.data));
                i += 1;
            }
        }
        state.step = ck.step;
        state.rng = Rng::from_state_bytes(&ck.rng_state);
        Ok(state)
    }
}


#[cfg(test)]
impl TrainState {
    fn clone_with_cfg(&self, cfg: TrainConfig) -> TrainState {
        let mut c = self.clone();
        c.cfg = cfg;
        c
    }
}
