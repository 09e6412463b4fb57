//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use latefuse::aclm::AcousticLm;
use latefuse::codec::Codec;
use latefuse::config::Config;
use latefuse::data::{PromptedSample, TaskKind};
use latefuse::lm::{LanguageModel, LmConfig};
use latefuse::pipeline::{
    build_dataset, fit_speech_side, heldout_texts, run_stage0, run_stage1, run_stage2, run_stage3, LmArtifacts,
};
use latefuse::lora::{inject_lora, Expert};
use latefuse::numerics::{Graph, ParamHost, Real, Tensor, Trainable, Var};
use latefuse::rng::stream;
use latefuse::vocab::UnifiedVocab;
use latefuse::Result;

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Fixed projection weights, so a non-scalar output reduces to a loss with
/// distinct upstream gradients per element.
fn projection(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n], |i| (0.7 * i as f64 + 0.3).sin())
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, projection(n).into_data())?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Largest relative error between the tape gradient and central
/// differences, over every element of every input.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new(Trainable::None);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("input gradient").to_vec()).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += GRAD_H;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * GRAD_H;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * GRAD_H);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Like [`gradcheck`] for named parameters of a model: compares the first
/// `per_param` elements of every parameter in `names`.
pub fn param_gradcheck<M: ParamHost<f64> + Clone>(
    model: &M,
    names: &[String],
    per_param: usize,
    loss: impl Fn(&M, &mut Graph<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new(Trainable::Only(names.iter().cloned().collect()));
    let l = loss(model, &mut g)?;
    g.backward(l)?;
    let grads = g.param_grads();
    let value = |m: &M| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(m, &mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for name in names {
        let (_, grad) = grads
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let len = grad.len();
        let stride = (len / per_param).max(1);
        for j in (0..len).step_by(stride).take(per_param) {
            let mut m = model.clone();
            m.param_mut(name).expect("named parameter").data_mut()[j] += GRAD_H;
            let up = value(&m)?;
            m.param_mut(name).expect("named parameter").data_mut()[j] -= 2.0 * GRAD_H;
            let down = value(&m)?;
            worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * GRAD_H)));
        }
    }
    Ok(worst)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut stream(seed, "test/randn"))
}

/// A two-layer model small enough for exhaustive checks.
pub fn tiny_lm_config() -> LmConfig {
    LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 24,
        vocab: UnifiedVocab::default(),
    }
}

/// Tiny model with the semantic vocabulary already appended.
pub fn tiny_lm<T: Real>(seed: u64) -> LanguageModel<T> {
    let cfg = tiny_lm_config();
    let base = LanguageModel::<T>::new(cfg, &mut stream(seed, "test/lm")).unwrap();
    base.extend_vocabulary(cfg.vocab.n_semantic as usize, 0.02, &mut stream(seed, "test/vocab"))
        .unwrap()
}

/// An expert whose `B` matrices are non-zero, so its delta is visible.
pub fn active_expert<T: Real>(model: &LanguageModel<T>, name: &str, seed: u64) -> Expert<T> {
    let mut e = inject_lora(model, name, 2, 4.0, &mut stream(seed, &format!("test/{name}/a"))).unwrap();
    let mut rng = stream(seed, &format!("test/{name}/b"));
    for target in e.targets() {
        let key = format!("{target}.lora_b");
        let shape = e.params.get(&key).unwrap().shape().to_vec();
        *e.params.get_mut(&key).unwrap() = Tensor::randn(&shape, 0.1, &mut rng);
    }
    e
}

/// Token sequences that exercise the position restart at `<assistant>`.
pub fn sample_seqs() -> Vec<Vec<u32>> {
    use latefuse::vocab::{ASSISTANT, BOS, EOS, SYS_QA, SYS_TTS, USER};
    vec![
        vec![BOS, SYS_QA, USER, 1, 16, 2, 17, 18, ASSISTANT, 3, EOS],
        vec![BOS, SYS_TTS, USER, 5, 6, ASSISTANT, 70, 71, 90, EOS],
        vec![BOS, SYS_QA, USER, 9, ASSISTANT],
    ]
}

/// Everything one pass of the four training stages produces.
pub struct FullRun {
    pub cfg: Config,
    pub codec: Codec,
    pub aclm: AcousticLm<f32>,
    pub data: BTreeMap<TaskKind, Vec<PromptedSample>>,
    pub heldout: Vec<String>,
    pub stages: [LmArtifacts; 4],
    pub router_warnings: Vec<String>,
}

/// Runs the speech side and stages 0 to 3 in memory, the way the CLI
/// chains them.
pub fn full_run(cfg: &Config) -> FullRun {
    let (codec, aclm, _) = fit_speech_side(cfg).unwrap();
    let mut data = BTreeMap::new();
    for kind in [TaskKind::Tts, TaskKind::TextQa, TaskKind::SpeechQa] {
        let n = cfg
            .stages
            .iter()
            .flat_map(|s| &s.datasets)
            .filter(|d| d.kind == kind)
            .map(|d| d.n_samples)
            .max()
            .unwrap_or(0);
        data.insert(kind, build_dataset(kind, n, cfg.seed, Some(&codec), &cfg.vocab).unwrap());
    }
    let heldout = heldout_texts(cfg.seed, 50, &data[&TaskKind::Tts]);
    let mut sink = |_: &latefuse::pipeline::MetricRecord| Ok(());
    let s0 = run_stage0(cfg, &data, &mut sink).unwrap();
    let s1 = run_stage1(cfg, &s0, &data, &mut sink).unwrap();
    let s2 = run_stage2(cfg, &s1, &data, &mut sink).unwrap();
    let (s3, router_warnings) = run_stage3(cfg, &s2, &data, &mut sink).unwrap();
    FullRun {
        cfg: cfg.clone(),
        codec,
        aclm,
        data,
        heldout,
        stages: [s0, s1, s2, s3],
        router_warnings,
    }
}

/// [`tiny_lm`] with every weight jittered by N(0, 0.3²). At the small
/// default init the attention gradients sit near 1e-7, where central
/// differences with h = 1e-5 are dominated by rounding.
pub fn gradcheck_lm(seed: u64) -> LanguageModel<f64> {
    let mut lm: LanguageModel<f64> = tiny_lm(seed);
    let mut rng = stream(seed, "test/jitter");
    for name in lm.qualified_names() {
        let t = lm.param_mut(&name).unwrap();
        let noise = Tensor::<f64>::randn(t.shape(), 0.3, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    lm
}
