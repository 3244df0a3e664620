//! Dense reference for the memory-attention stack.

use candle_core::DType;
use unitrack::nn::ParamStore;
use unitrack::propagation::{MemoryEntry, Propagator};
use unitrack::ModelConfig;

use super::{dense_attention, gelu_tanh, layer_norm, Mat};

pub const HEADS: usize = 2;

pub fn setup(seed: u64) -> (ParamStore, Propagator) {
    let cfg = ModelConfig { channels: 8, heads: HEADS, propagation_layers: 3, ..ModelConfig::default() };
    let mut ps = ParamStore::new(seed, DType::F64);
    let prop = Propagator::new(&mut ps, &cfg).unwrap();
    // Move norms away from their identity initialization so every parameter matters.
    let mut rng = super::rng(seed + 100);
    for var in ps.vars().values() {
        let noise = super::random_tensor(&mut rng, var.dims(), 0.3);
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }
    (ps, prop)
}

pub fn entry(rng: &mut impl rand::Rng, hw: usize, c: usize, frame_index: usize) -> MemoryEntry {
    MemoryEntry {
        keys: super::random_tensor(rng, &[hw, c], 1.0),
        values: super::random_tensor(rng, &[hw, c], 1.0),
        id_emb: super::random_tensor(rng, &[hw, c], 1.0),
        frame_index,
    }
}

fn param(ps: &ParamStore, name: &str) -> Mat {
    let t = ps.get(name).unwrap_or_else(|| panic!("missing {name}")).as_tensor().clone();
    match t.rank() {
        1 => Mat { rows: 1, cols: t.dim(0).unwrap(), data: super::flat(&t) },
        _ => Mat::from_tensor(&t),
    }
}

fn linear(ps: &ParamStore, name: &str, x: &Mat) -> Mat {
    x.matmul(&param(ps, &format!("{name}.weight"))).add_row(&param(ps, &format!("{name}.bias")).data)
}

fn norm(ps: &ParamStore, name: &str, x: &Mat) -> Mat {
    layer_norm(x, &param(ps, &format!("{name}.gamma")).data, &param(ps, &format!("{name}.beta")).data)
}

/// Pre-norm memory attention layers written directly from their definition:
/// `V = Attn(Q_t, K_m, V_m + E_id)` with positions on queries and keys, then a GELU feed-forward block.
pub fn dense_propagate(ps: &ParamStore, query: &Mat, grid: (usize, usize), memory: &[&MemoryEntry]) -> Mat {
    let c = query.cols;
    let pos = super::sine_positions(grid.0, grid.1, c);
    let keys: Vec<Mat> = memory.iter().map(|e| Mat::from_tensor(&e.keys)).collect();
    let values: Vec<Mat> = memory.iter().map(|e| Mat::from_tensor(&e.values)).collect();
    let ids: Vec<Mat> = memory.iter().map(|e| Mat::from_tensor(&e.id_emb)).collect();
    let mem_k = Mat::vstack(&keys.iter().map(|k| k.add(&pos)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
    let mem_v = Mat::vstack(&values.iter().collect::<Vec<_>>());
    let mem_id = Mat::vstack(&ids.iter().collect::<Vec<_>>());
    let mut x = query.clone();
    for l in 0..3 {
        let p = format!("propagation.layer{l}");
        let q = linear(ps, &format!("{p}.q"), &norm(ps, &format!("{p}.norm_query"), &x).add(&pos));
        let k = linear(ps, &format!("{p}.k"), &mem_k);
        let v = linear(ps, &format!("{p}.v"), &mem_v).add(&mem_id);
        x = x.add(&linear(ps, &format!("{p}.out"), &dense_attention(&q, &k, &v, HEADS)));
        let h = linear(ps, &format!("{p}.ffn.fc1"), &norm(ps, &format!("{p}.norm_ffn"), &x)).map(gelu_tanh);
        x = x.add(&linear(ps, &format!("{p}.ffn.fc2"), &h));
    }
    norm(ps, "propagation.final_norm", &x)
}
